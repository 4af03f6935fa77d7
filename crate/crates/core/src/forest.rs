//! Phase-1 random forest.
//!
//! Trees are grown without a depth limit on bootstrap samples, considering a
//! fresh random feature subset at every node and splitting on Gini impurity.
//! A record's score is the fraction of trees whose leaf votes "home"; the
//! filter keeps records whose score reaches a small threshold, so one tree is
//! enough to keep a record at the default operating point.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    /// Left child is the next node in preorder.
    Split {
        feature: u32,
        threshold: f64,
        right: u32,
    },
    Leaf {
        home_prob: f64,
    },
}

/// Serialized node: `{"feature": i, "threshold": t}` or `{"leaf": p}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum NodeDoc {
    Split { feature: u32, threshold: f64 },
    Leaf { leaf: f64 },
}

/// A decision tree stored as a preorder node list. A record goes left when
/// `x[feature] <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<NodeDoc>", into = "Vec<NodeDoc>")]
pub struct Tree {
    nodes: Vec<Node>,
}

impl From<Tree> for Vec<NodeDoc> {
    fn from(t: Tree) -> Self {
        t.nodes
            .iter()
            .map(|n| match *n {
                Node::Split {
                    feature, threshold, ..
                } => NodeDoc::Split { feature, threshold },
                Node::Leaf { home_prob } => NodeDoc::Leaf { leaf: home_prob },
            })
            .collect()
    }
}

impl TryFrom<Vec<NodeDoc>> for Tree {
    type Error = String;

    fn try_from(docs: Vec<NodeDoc>) -> std::result::Result<Self, String> {
        fn walk(
            docs: &[NodeDoc],
            at: usize,
            nodes: &mut Vec<Node>,
        ) -> std::result::Result<usize, String> {
            match docs.get(at) {
                None => Err("truncated tree".into()),
                Some(NodeDoc::Leaf { leaf }) => {
                    if !(0.0..=1.0).contains(leaf) {
                        return Err(format!("leaf probability {leaf} outside [0, 1]"));
                    }
                    nodes.push(Node::Leaf { home_prob: *leaf });
                    Ok(at + 1)
                }
                Some(NodeDoc::Split { feature, threshold }) => {
                    let me = nodes.len();
                    nodes.push(Node::Leaf { home_prob: 0.0 });
                    let after_left = walk(docs, at + 1, nodes)?;
                    let right = nodes.len() as u32;
                    let after_right = walk(docs, after_left, nodes)?;
                    nodes[me] = Node::Split {
                        feature: *feature,
                        threshold: *threshold,
                        right,
                    };
                    Ok(after_right)
                }
            }
        }
        let mut nodes = Vec::with_capacity(docs.len());
        let end = walk(&docs, 0, &mut nodes)?;
        if end != docs.len() {
            return Err("trailing nodes after tree".into());
        }
        Ok(Tree { nodes })
    }
}

impl Tree {
    pub fn leaf(home_prob: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { home_prob }],
        }
    }

    /// Leaf home-fraction reached by `x`.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match self.nodes[at] {
                Node::Leaf { home_prob } => return home_prob,
                Node::Split {
                    feature,
                    threshold,
                    right,
                } => {
                    at = if x[feature as usize] <= threshold {
                        at + 1
                    } else {
                        right as usize
                    };
                }
            }
        }
    }

    /// Strict majority of the reached leaf is home.
    pub fn votes_home(&self, x: &[f64]) -> bool {
        self.predict(x) > 0.5
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { right, .. } => 1 + go(nodes, at + 1).max(go(nodes, right as usize)),
            }
        }
        go(&self.nodes, 0)
    }

    /// Features this tree actually splits on.
    pub fn features_used(&self) -> BTreeSet<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature as usize),
                Node::Leaf { .. } => None,
            })
            .collect()
    }

    fn max_feature(&self) -> Option<usize> {
        self.features_used().into_iter().next_back()
    }
}

struct Grower<'a, R: Rng> {
    x: &'a Matrix,
    y: &'a [bool],
    subset_size: usize,
    rng: &'a mut R,
    nodes: Vec<Node>,
    buf: Vec<(f64, bool)>,
}

/// Sum over children of `n * gini`, i.e. `n - (pos^2 + neg^2) / n`.
#[inline]
fn weighted_gini(n: f64, pos: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else {
        let neg = n - pos;
        n - (pos * pos + neg * neg) / n
    }
}

impl<R: Rng> Grower<'_, R> {
    fn grow(&mut self, idx: &mut [usize]) {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        if pos == 0 || pos == n {
            self.nodes.push(Node::Leaf {
                home_prob: pos as f64 / n as f64,
            });
            return;
        }
        let Some((feature, threshold)) = self.best_split(idx, pos) else {
            self.nodes.push(Node::Leaf {
                home_prob: pos as f64 / n as f64,
            });
            return;
        };

        let mut split = 0;
        for k in 0..n {
            if self.x.get(idx[k], feature) <= threshold {
                idx.swap(k, split);
                split += 1;
            }
        }
        debug_assert!(split > 0 && split < n);

        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { home_prob: 0.0 });
        let (left, right) = idx.split_at_mut(split);
        self.grow(left);
        let right_at = self.nodes.len() as u32;
        self.grow(right);
        self.nodes[me] = Node::Split {
            feature: feature as u32,
            threshold,
            right: right_at,
        };
    }

    /// Lowest weighted Gini over the node's feature subset. Ties keep the
    /// lowest feature index, then the lowest threshold.
    fn best_split(&mut self, idx: &[usize], pos: usize) -> Option<(usize, f64)> {
        let d = self.x.cols();
        let mut features = index::sample(self.rng, d, self.subset_size.min(d)).into_vec();
        features.sort_unstable();

        let n = idx.len() as f64;
        let total_pos = pos as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        for f in features {
            self.buf.clear();
            self.buf
                .extend(idx.iter().map(|&i| (self.x.get(i, f), self.y[i])));
            self.buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if self.buf[0].0 == self.buf[self.buf.len() - 1].0 {
                continue;
            }
            let mut left_n = 0.0;
            let mut left_pos = 0.0;
            for k in 0..self.buf.len() - 1 {
                left_n += 1.0;
                if self.buf[k].1 {
                    left_pos += 1.0;
                }
                let (a, b) = (self.buf[k].0, self.buf[k + 1].0);
                if a == b {
                    continue;
                }
                let score = weighted_gini(left_n, left_pos)
                    + weighted_gini(n - left_n, total_pos - left_pos);
                if best.is_none_or(|(s, _, _)| score < s) {
                    let mut threshold = a + (b - a) / 2.0;
                    if !(threshold < b) {
                        threshold = a;
                    }
                    best = Some((score, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

fn grow_tree<R: Rng>(
    x: &Matrix,
    y: &[bool],
    sample: &mut [usize],
    subset_size: usize,
    rng: &mut R,
) -> Tree {
    let mut grower = Grower {
        x,
        y,
        subset_size,
        rng,
        nodes: Vec::new(),
        buf: Vec::with_capacity(sample.len()),
    };
    grower.grow(sample);
    Tree {
        nodes: grower.nodes,
    }
}

/// `n` indices drawn uniformly with replacement.
pub fn bootstrap_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Seeded bootstrap sample of `n` row indices.
pub fn bootstrap_sample(n: usize, seed: u64) -> Vec<usize> {
    bootstrap_indices(n, &mut rng::stream(seed, 0))
}

/// Grows one tree on every row of `x`.
pub fn train_tree(x: &Matrix, y: &[bool], feature_subset_size: usize, seed: u64) -> Result<Tree> {
    check_training_set(x, y, feature_subset_size)?;
    let mut sample: Vec<usize> = (0..x.rows()).collect();
    Ok(grow_tree(
        x,
        y,
        &mut sample,
        feature_subset_size,
        &mut rng::stream(seed, 0),
    ))
}

fn check_training_set(x: &Matrix, y: &[bool], feature_subset_size: usize) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Validation(
            "cannot train a tree on an empty sample".into(),
        ));
    }
    if x.rows() != y.len() {
        return Err(Error::Validation(format!(
            "{} rows but {} labels",
            x.rows(),
            y.len()
        )));
    }
    if feature_subset_size == 0 || feature_subset_size > x.cols() {
        return Err(Error::Config(format!(
            "feature subset size {feature_subset_size} not in 1..={}",
            x.cols()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features considered per node; 3 = floor(sqrt(10)).
    pub feature_subset_size: usize,
    /// Phase-1 vote-fraction threshold.
    pub threshold: f64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 500,
            feature_subset_size: 3,
            threshold: 0.002,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.feature_subset_size == 0 {
            return Err(Error::Config(
                "forest feature_subset_size must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "forest threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_trees: usize,
    pub n_features: usize,
    pub feature_subset_size: usize,
    pub seed: u64,
    pub trees: Vec<Tree>,
}

/// Trains `n_trees` trees. Tree `i` draws its bootstrap sample and feature
/// subsets from stream `i` of `seed`, so the result does not depend on how
/// the work is scheduled.
pub fn train_forest(
    x: &Matrix,
    y: &[bool],
    n_trees: usize,
    feature_subset_size: usize,
    seed: u64,
) -> Result<ForestModel> {
    check_training_set(x, y, feature_subset_size)?;
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let mut sample = bootstrap_indices(x.rows(), &mut rng);
            grow_tree(x, y, &mut sample, feature_subset_size, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        n_trees,
        n_features: x.cols(),
        feature_subset_size,
        seed,
        trees,
    })
}

/// Feature matrix of a dataset.
pub fn dataset_matrix(dataset: &Dataset) -> Matrix {
    Matrix::from_rows(&dataset.feature_rows())
}

impl ForestModel {
    pub fn fit(dataset: &Dataset, params: &ForestParams, seed: u64) -> Result<Self> {
        train_forest(
            &dataset_matrix(dataset),
            &dataset.labels(),
            params.n_trees,
            params.feature_subset_size,
            seed,
        )
    }

    /// Fraction of trees voting home; 0 for an empty forest.
    pub fn vote_fraction(&self, x: &[f64]) -> f64 {
        if self.trees.is_empty() {
            return 0.0;
        }
        let votes = self.trees.iter().filter(|t| t.votes_home(x)).count();
        votes as f64 / self.trees.len() as f64
    }

    pub fn vote_fractions(&self, dataset: &Dataset) -> Vec<f64> {
        dataset
            .records()
            .par_iter()
            .map(|r| self.vote_fraction(&r.features))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trees.len() != self.n_trees {
            return Err(Error::Validation(format!(
                "forest declares {} trees but holds {}",
                self.n_trees,
                self.trees.len()
            )));
        }
        for t in &self.trees {
            if t.max_feature().is_some_and(|f| f >= self.n_features) {
                return Err(Error::Validation(
                    "tree splits on an unknown feature".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub threshold: f64,
    pub n_records: usize,
    pub n_selected: usize,
    pub n_users: usize,
    pub n_homes: usize,
    pub n_homes_kept: usize,
    /// Fraction of true-home records kept; 1 when there are no homes.
    pub recall: f64,
    pub selected_fraction: f64,
    pub mean_records_per_user: f64,
    pub mean_selected_per_user: f64,
    pub users_without_selection: Vec<String>,
}

/// Keeps records whose precomputed vote fraction is at least `threshold`.
pub fn filter_by_votes(dataset: &Dataset, votes: &[f64], threshold: f64) -> (Dataset, FilterStats) {
    assert_eq!(dataset.len(), votes.len(), "one vote per record");
    let selected = dataset.filter_records(|i, _| votes[i] >= threshold);
    let n_homes = dataset.n_homes();
    let n_homes_kept = selected.n_homes();
    let n_users = dataset.n_users();
    let users_without_selection = dataset
        .users()
        .iter()
        .filter(|u| selected.user_indices(u).is_empty())
        .cloned()
        .collect();
    let per_user = |n: usize| {
        if n_users == 0 {
            0.0
        } else {
            n as f64 / n_users as f64
        }
    };
    let stats = FilterStats {
        threshold,
        n_records: dataset.len(),
        n_selected: selected.len(),
        n_users,
        n_homes,
        n_homes_kept,
        recall: if n_homes == 0 {
            1.0
        } else {
            n_homes_kept as f64 / n_homes as f64
        },
        selected_fraction: if dataset.is_empty() {
            0.0
        } else {
            selected.len() as f64 / dataset.len() as f64
        },
        mean_records_per_user: per_user(dataset.len()),
        mean_selected_per_user: per_user(selected.len()),
        users_without_selection,
    };
    (selected, stats)
}

/// Phase-1 filter over (normalized) records.
pub fn phase1_filter(
    model: &ForestModel,
    dataset: &Dataset,
    threshold: f64,
) -> (Dataset, FilterStats) {
    let votes = model.vote_fractions(dataset);
    filter_by_votes(dataset, &votes, threshold)
}
