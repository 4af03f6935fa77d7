//! Min-max feature normalization to `[-1, 1]` and user-disjoint fold plans.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureVector, N_FEATURES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub min: FeatureVector,
    pub max: FeatureVector,
}

impl NormParams {
    /// `X' = 2 (X - min) / (max - min) - 1`; constant features map to 0.
    /// With `clamp`, values outside the fitted range are pinned to `[-1, 1]`.
    pub fn transform(&self, x: &FeatureVector, clamp: bool) -> FeatureVector {
        let mut out = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            let (lo, hi) = (self.min[j], self.max[j]);
            out[j] = if hi > lo {
                let v = 2.0 * (x[j] - lo) / (hi - lo) - 1.0;
                if clamp {
                    v.clamp(-1.0, 1.0)
                } else {
                    v
                }
            } else {
                0.0
            };
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        for j in 0..N_FEATURES {
            if !(self.min[j] <= self.max[j]) {
                return Err(Error::Validation(format!(
                    "normalization range for feature {j} is inverted"
                )));
            }
        }
        Ok(())
    }
}

/// Per-feature min and max over every record. An empty dataset yields the
/// all-zero range, which normalizes everything to 0.
pub fn fit_norm(dataset: &Dataset) -> NormParams {
    if dataset.is_empty() {
        return NormParams {
            min: [0.0; N_FEATURES],
            max: [0.0; N_FEATURES],
        };
    }
    let mut min = [f64::INFINITY; N_FEATURES];
    let mut max = [f64::NEG_INFINITY; N_FEATURES];
    for r in dataset.records() {
        for j in 0..N_FEATURES {
            min[j] = min[j].min(r.features[j]);
            max[j] = max[j].max(r.features[j]);
        }
    }
    NormParams { min, max }
}

pub fn apply_norm(params: &NormParams, dataset: &Dataset) -> Dataset {
    dataset.map_features(|f| params.transform(f, false))
}

/// [`apply_norm`] with out-of-range values clamped, for data the parameters
/// were not fitted on.
pub fn apply_norm_clamped(params: &NormParams, dataset: &Dataset) -> Dataset {
    dataset.map_features(|f| params.transform(f, true))
}

/// Assignment of users to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
    /// Users per fold in dealing order.
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn fold_of(&self, user: &str) -> Option<usize> {
        self.assignment.get(user).copied()
    }

    /// `(train, test)` datasets for one fold.
    pub fn partition(&self, dataset: &Dataset, fold: usize) -> (Dataset, Dataset) {
        let train = dataset.subset_users(|u| self.fold_of(u) != Some(fold));
        let test = dataset.subset_users(|u| self.fold_of(u) == Some(fold));
        (train, test)
    }
}

/// Shuffles users with a seeded PRNG and deals them round-robin.
pub fn split_folds(users: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!(
            "fold count must be at least 2, got {k}"
        )));
    }
    if users.len() < k {
        return Err(Error::Validation(format!(
            "{} users cannot fill {k} folds",
            users.len()
        )));
    }
    let mut shuffled = users.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    let mut assignment = BTreeMap::new();
    for (i, u) in shuffled.into_iter().enumerate() {
        if assignment.insert(u.clone(), i % k).is_some() {
            return Err(Error::Validation(format!("duplicate user {u}")));
        }
        folds[i % k].push(u);
    }
    Ok(FoldPlan {
        k,
        seed,
        assignment,
        folds,
    })
}
