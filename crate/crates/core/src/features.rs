//! Per-(user, location) feature extraction.
//!
//! Days are "logical days" running 03:00 to 03:00 local time. The transition
//! graph counts consecutive same-day moves between distinct clusters; its
//! PageRank and reverse PageRank are computed per user.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{feature, CheckIn, Dataset, FeatureVector, LocationRecord, N_FEATURES};
use crate::error::{Error, Result};
use crate::geo::{self, haversine_m, GeoPoint};

const DAY_START_HOUR: u32 = 3;
const END_OF_DAY_FROM_HOUR: u32 = 17;
const MIDNIGHT_UNTIL_HOUR: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LogicalDay(pub NaiveDate);

impl LogicalDay {
    pub fn is_weekend(&self) -> bool {
        matches!(self.0.weekday(), Weekday::Sat | Weekday::Sun)
    }
}

/// Times before 03:00 belong to the previous calendar date.
pub fn logical_day(ts: &NaiveDateTime) -> LogicalDay {
    if ts.hour() < DAY_START_HOUR {
        LogicalDay(ts.date() - Duration::days(1))
    } else {
        LogicalDay(ts.date())
    }
}

/// 17:00 to 03:00 of a logical day.
fn in_end_of_day_window(ts: &NaiveDateTime) -> bool {
    let h = ts.hour();
    !(DAY_START_HOUR..END_OF_DAY_FROM_HOUR).contains(&h)
}

fn in_midnight_window(ts: &NaiveDateTime) -> bool {
    ts.hour() < MIDNIGHT_UNTIL_HOUR
}

/// One check-in of a user reduced to its time and location cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visit {
    pub time: NaiveDateTime,
    pub cluster: u32,
}

impl Visit {
    pub fn new(time: NaiveDateTime, cluster: u32) -> Self {
        Visit { time, cluster }
    }
}

/// Sorts visits chronologically; equal timestamps keep their input order.
pub fn sort_visits(visits: &mut [Visit]) {
    visits.sort_by_key(|v| v.time);
}

pub fn check_in_ratio(visits: &[Visit], cluster: u32) -> f64 {
    if visits.is_empty() {
        return 0.0;
    }
    visits.iter().filter(|v| v.cluster == cluster).count() as f64 / visits.len() as f64
}

/// Check-ins per active logical day.
pub fn daily_total_rate(visits: &[Visit]) -> f64 {
    let days: BTreeSet<LogicalDay> = visits.iter().map(|v| logical_day(&v.time)).collect();
    if days.is_empty() {
        0.0
    } else {
        visits.len() as f64 / days.len() as f64
    }
}

/// Last visit of each logical day, keyed by day. `visits` must be chronological.
fn day_final_visits(visits: &[Visit]) -> BTreeMap<LogicalDay, Visit> {
    let mut last = BTreeMap::new();
    for v in visits {
        last.insert(logical_day(&v.time), *v);
    }
    last
}

fn end_ratio(visits: &[Visit], cluster: u32, weekend_only: bool) -> f64 {
    let mut qualifying = 0usize;
    let mut here = 0usize;
    for (day, v) in day_final_visits(visits) {
        if weekend_only && !day.is_weekend() {
            continue;
        }
        if in_end_of_day_window(&v.time) {
            qualifying += 1;
            if v.cluster == cluster {
                here += 1;
            }
        }
    }
    if qualifying == 0 {
        0.0
    } else {
        here as f64 / qualifying as f64
    }
}

/// Share of logical days ending (17:00 to 03:00) at `cluster`.
pub fn end_of_day_ratio(visits: &[Visit], cluster: u32) -> f64 {
    end_ratio(visits, cluster, false)
}

/// [`end_of_day_ratio`] over Saturday and Sunday logical days only.
pub fn end_of_inactive_day_ratio(visits: &[Visit], cluster: u32) -> f64 {
    end_ratio(visits, cluster, true)
}

/// Share of the user's 00:00 to 07:00 check-ins made at `cluster`.
pub fn midnight_ratio(visits: &[Visit], cluster: u32) -> f64 {
    let (mut total, mut here) = (0usize, 0usize);
    for v in visits.iter().filter(|v| in_midnight_window(&v.time)) {
        total += 1;
        if v.cluster == cluster {
            here += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        here as f64 / total as f64
    }
}

/// Cluster with the most visits; ties go to the lowest id.
pub fn most_visited(counts: &BTreeMap<u32, usize>) -> Option<u32> {
    counts
        .iter()
        .fold(None, |best: Option<(u32, usize)>, (&c, &n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((c, n)),
        })
        .map(|(c, _)| c)
}

pub fn visit_counts(visits: &[Visit]) -> BTreeMap<u32, usize> {
    let mut counts = BTreeMap::new();
    for v in visits {
        *counts.entry(v.cluster).or_insert(0) += 1;
    }
    counts
}

/// Meters from `cluster`'s centroid to the most-visited cluster's centroid.
pub fn distance_from_most_checkin_m(
    centroids: &BTreeMap<u32, GeoPoint>,
    counts: &BTreeMap<u32, usize>,
    cluster: u32,
) -> Result<f64> {
    let top = most_visited(counts).ok_or_else(|| Error::Validation("user has no visits".into()))?;
    let lookup = |c: u32| {
        centroids
            .get(&c)
            .copied()
            .ok_or_else(|| Error::Validation(format!("no centroid for cluster {c}")))
    };
    Ok(haversine_m(lookup(cluster)?, lookup(top)?))
}

/// Weighted directed graph of one user's moves between locations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionGraph {
    nodes: Vec<u32>,
    edges: BTreeMap<(u32, u32), f64>,
}

impl TransitionGraph {
    /// Nodes are deduplicated and sorted; edge endpoints are added as nodes.
    /// Self-loops and non-positive weights are rejected.
    pub fn new(
        nodes: impl IntoIterator<Item = u32>,
        edges: impl IntoIterator<Item = ((u32, u32), f64)>,
    ) -> Result<Self> {
        let mut node_set: BTreeSet<u32> = nodes.into_iter().collect();
        let mut map = BTreeMap::new();
        for ((u, v), w) in edges {
            if u == v {
                return Err(Error::Validation(format!("self-loop on node {u}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Validation(format!("edge {u}->{v} has weight {w}")));
            }
            node_set.insert(u);
            node_set.insert(v);
            *map.entry((u, v)).or_insert(0.0) += w;
        }
        Ok(TransitionGraph {
            nodes: node_set.into_iter().collect(),
            edges: map,
        })
    }

    pub fn nodes(&self) -> &[u32] {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeMap<(u32, u32), f64> {
        &self.edges
    }

    pub fn weight(&self, from: u32, to: u32) -> f64 {
        self.edges.get(&(from, to)).copied().unwrap_or(0.0)
    }

    pub fn reversed(&self) -> TransitionGraph {
        TransitionGraph {
            nodes: self.nodes.clone(),
            edges: self.edges.iter().map(|(&(u, v), &w)| ((v, u), w)).collect(),
        }
    }
}

/// Counts consecutive same-logical-day moves between distinct clusters.
/// `visits` must be chronological.
pub fn build_transition_graph(visits: &[Visit]) -> TransitionGraph {
    let nodes: BTreeSet<u32> = visits.iter().map(|v| v.cluster).collect();
    let mut edges: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for pair in visits.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.cluster != b.cluster && logical_day(&a.time) == logical_day(&b.time) {
            *edges.entry((a.cluster, b.cluster)).or_insert(0.0) += 1.0;
        }
    }
    TransitionGraph {
        nodes: nodes.into_iter().collect(),
        edges,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PageRankParams {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PageRankParams {
    fn default() -> Self {
        PageRankParams {
            damping: 0.85,
            tol: 1e-9,
            max_iter: 100,
        }
    }
}

impl PageRankParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::Config(format!(
                "pagerank damping must be in (0, 1), got {}",
                self.damping
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("pagerank tol must be positive".into()));
        }
        Ok(())
    }
}

/// Power iteration with uniform teleport. Dangling nodes spread their mass
/// uniformly. Stops when the L1 change drops below `tol` or after `max_iter`.
pub fn pagerank(graph: &TransitionGraph, params: &PageRankParams) -> BTreeMap<u32, f64> {
    let n = graph.nodes.len();
    if n == 0 {
        return BTreeMap::new();
    }
    let pos: HashMap<u32, usize> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let edges: Vec<(usize, usize, f64)> = graph
        .edges
        .iter()
        .map(|(&(u, v), &w)| (pos[&u], pos[&v], w))
        .collect();
    let mut out_weight = vec![0.0; n];
    for &(u, _, w) in &edges {
        out_weight[u] += w;
    }

    let d = params.damping;
    let nf = n as f64;
    let mut rank = vec![1.0 / nf; n];
    let mut next = vec![0.0; n];
    for _ in 0..params.max_iter {
        let dangling: f64 = rank
            .iter()
            .zip(&out_weight)
            .filter(|(_, &w)| w == 0.0)
            .map(|(r, _)| r)
            .sum();
        let base = (1.0 - d) / nf + d * dangling / nf;
        next.iter_mut().for_each(|x| *x = base);
        for &(u, v, w) in &edges {
            next[v] += d * rank[u] * w / out_weight[u];
        }
        let delta: f64 = rank.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        if delta < params.tol {
            break;
        }
    }
    graph.nodes.iter().copied().zip(rank).collect()
}

/// PageRank of the edge-reversed graph.
pub fn reverse_pagerank(graph: &TransitionGraph, params: &PageRankParams) -> BTreeMap<u32, f64> {
    pagerank(&graph.reversed(), params)
}

/// Feature vectors for every location of one user, ordered by cluster id.
/// Returns `(cluster, centroid, features)` triples.
pub fn user_features(
    visits: &[Visit],
    points: &[GeoPoint],
    params: &PageRankParams,
) -> Result<Vec<(u32, GeoPoint, FeatureVector)>> {
    if visits.len() != points.len() {
        return Err(Error::Validation(
            "visits and points differ in length".into(),
        ));
    }
    if visits.is_empty() {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..visits.len()).collect();
    order.sort_by_key(|&i| visits[i].time);
    let sorted: Vec<Visit> = order.iter().map(|&i| visits[i]).collect();

    let assignment = geo::ClusterAssignment {
        labels: visits.iter().map(|v| Some(v.cluster)).collect(),
        n_clusters: 0,
    };
    let centroids = geo::centroids(points, &assignment)?;
    let counts = visit_counts(&sorted);
    let graph = build_transition_graph(&sorted);
    let pr = pagerank(&graph, params);
    let rpr = reverse_pagerank(&graph, params);
    let total = sorted.len() as f64;
    let rate = daily_total_rate(&sorted);

    counts
        .iter()
        .map(|(&cluster, &here)| {
            let mut f = [0.0; N_FEATURES];
            f[feature::CHECK_IN_RATIO] = check_in_ratio(&sorted, cluster);
            f[feature::DAILY_TOTAL_RATE] = rate;
            f[feature::END_OF_DAY_RATIO] = end_of_day_ratio(&sorted, cluster);
            f[feature::END_OF_INACTIVE_DAY_RATIO] = end_of_inactive_day_ratio(&sorted, cluster);
            f[feature::DISTANCE_FROM_MOST_CHECKIN_M] =
                distance_from_most_checkin_m(&centroids, &counts, cluster)?;
            f[feature::MIDNIGHT_RATIO] = midnight_ratio(&sorted, cluster);
            f[feature::CHECKINS_HERE] = here as f64;
            f[feature::TOTAL_CHECKINS] = total;
            f[feature::PAGERANK] = pr[&cluster];
            f[feature::REVERSE_PAGERANK] = rpr[&cluster];
            Ok((cluster, centroids[&cluster], f))
        })
        .collect()
}

/// Check-in indices grouped by user, users in first-appearance order.
pub fn group_by_user(checkins: &[CheckIn]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for (i, c) in checkins.iter().enumerate() {
        match pos.get(c.user_id.as_str()) {
            Some(&k) => order[k].1.push(i),
            None => {
                pos.insert(&c.user_id, order.len());
                order.push((c.user_id.clone(), vec![i]));
            }
        }
    }
    order
}

/// Runs DBSCAN per user and promotes noise to singleton clusters. The result
/// holds one per-user cluster id per check-in.
pub fn cluster_checkins(checkins: &[CheckIn], eps_m: f64, min_pts: usize) -> Result<Vec<u32>> {
    let groups = group_by_user(checkins);
    let per_user: Vec<Vec<u32>> = groups
        .par_iter()
        .map(|(_, idx)| {
            let pts: Vec<GeoPoint> = idx.iter().map(|&i| checkins[i].point()).collect();
            let asg = geo::assign_noise(&geo::dbscan(&pts, eps_m, min_pts)?);
            Ok(asg.dense_labels())
        })
        .collect::<Result<_>>()?;
    let mut labels = vec![0u32; checkins.len()];
    for ((_, idx), lab) in groups.iter().zip(per_user) {
        for (&i, l) in idx.iter().zip(lab) {
            labels[i] = l;
        }
    }
    Ok(labels)
}

/// Home cluster per user: the cluster whose centroid is nearest the true home
/// point (ties to the lowest id). Users absent from `truth` are skipped.
pub fn label_homes(
    checkins: &[CheckIn],
    clusters: &[u32],
    truth: &[(String, GeoPoint)],
) -> Result<HashMap<String, u32>> {
    if checkins.len() != clusters.len() {
        return Err(Error::Validation(
            "check-ins and cluster labels differ in length".into(),
        ));
    }
    let truth: HashMap<&str, GeoPoint> = truth.iter().map(|(u, p)| (u.as_str(), *p)).collect();
    let mut homes = HashMap::new();
    for (user, idx) in group_by_user(checkins) {
        let Some(&home) = truth.get(user.as_str()) else {
            continue;
        };
        let pts: Vec<GeoPoint> = idx.iter().map(|&i| checkins[i].point()).collect();
        let asg = geo::ClusterAssignment {
            labels: idx.iter().map(|&i| Some(clusters[i])).collect(),
            n_clusters: 0,
        };
        let best = geo::centroids(&pts, &asg)?
            .into_iter()
            .map(|(c, p)| (c, haversine_m(p, home)))
            .fold(None, |best: Option<(u32, f64)>, (c, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((c, d)),
            });
        if let Some((c, _)) = best {
            homes.insert(user, c);
        }
    }
    Ok(homes)
}

/// One record per (user, cluster) with all ten features. Users keep
/// first-appearance order, clusters ascend within a user.
pub fn extract_dataset(
    checkins: &[CheckIn],
    clusters: &[u32],
    homes: &HashMap<String, u32>,
    params: &PageRankParams,
) -> Result<Dataset> {
    if checkins.len() != clusters.len() {
        return Err(Error::Validation(
            "check-ins and cluster labels differ in length".into(),
        ));
    }
    let groups = group_by_user(checkins);
    let per_user: Vec<Vec<LocationRecord>> = groups
        .par_iter()
        .map(|(user, idx)| {
            let visits: Vec<Visit> = idx
                .iter()
                .map(|&i| Visit::new(checkins[i].timestamp, clusters[i]))
                .collect();
            let points: Vec<GeoPoint> = idx.iter().map(|&i| checkins[i].point()).collect();
            let home = homes.get(user).copied();
            if let Some(h) = home {
                if !visits.iter().any(|v| v.cluster == h) {
                    return Err(Error::Validation(format!(
                        "home cluster {h} of user {user} has no check-ins"
                    )));
                }
            }
            Ok(user_features(&visits, &points, params)?
                .into_iter()
                .map(|(cluster_id, c, features)| LocationRecord {
                    user_id: user.clone(),
                    cluster_id,
                    lat: c.lat,
                    lon: c.lon,
                    features,
                    is_home: home == Some(cluster_id),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Dataset::new(per_user.into_iter().flatten().collect())
}

/// Clusters, labels and extracts in one pass.
pub fn build_dataset(
    checkins: &[CheckIn],
    truth: &[(String, GeoPoint)],
    eps_m: f64,
    min_pts: usize,
    params: &PageRankParams,
) -> Result<Dataset> {
    let clusters = cluster_checkins(checkins, eps_m, min_pts)?;
    let homes = label_homes(checkins, &clusters, truth)?;
    extract_dataset(checkins, &clusters, &homes, params)
}
