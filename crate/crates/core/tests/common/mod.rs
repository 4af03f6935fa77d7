//! Independent reference implementations and the acceptance checks built on
//! them. Shared by the oracle tests and the acceptance runner.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use homecast_core::config::RunConfig;
use homecast_core::data::{self, Dataset, Provenance, RATIO_FEATURES};
use homecast_core::evaluation;
use homecast_core::features::{self, PageRankParams, TransitionGraph};
use homecast_core::forest::{filter_by_votes, ForestModel, ForestParams};
use homecast_core::geo::{self, GeoPoint};
use homecast_core::nn::{self, home_net_spec, LossKind, MlpModel, OptimizerConfig};
use homecast_core::pipeline;
use homecast_core::preprocess::{apply_norm, fit_norm};
use homecast_core::synth::{self, GeneratorConfig};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Data helpers
// ---------------------------------------------------------------------------

pub fn synthetic_dataset(n_users: usize, days: usize, seed: u64) -> Dataset {
    let cfg = GeneratorConfig {
        n_users,
        days,
        seed,
        ..GeneratorConfig::default()
    };
    let (checkins, truth) = synth::generate(&cfg).unwrap();
    let run = RunConfig::default();
    features::build_dataset(
        &checkins,
        &truth,
        run.dbscan.eps_m,
        run.dbscan.min_pts,
        &run.pagerank,
    )
    .unwrap()
}

/// Unlabeled records from uniformly random check-ins: many singleton
/// clusters, arbitrary times.
pub fn random_checkin_dataset(seed: u64) -> Dataset {
    let mut r = rng(seed);
    let start = chrono::NaiveDate::from_ymd_opt(2014, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let mut checkins = Vec::new();
    for u in 0..20 {
        let base = GeoPoint {
            lat: r.gen_range(-60.0..60.0),
            lon: r.gen_range(-170.0..170.0),
        };
        for _ in 0..r.gen_range(1..80) {
            let t = start + chrono::Duration::seconds(r.gen_range(0..90 * 86_400));
            let lat = base.lat + r.gen_range(-0.005..0.005);
            let lon = base.lon + r.gen_range(-0.005..0.005);
            checkins.push(data::CheckIn::new(format!("r{u}"), t, lat, lon).unwrap());
        }
    }
    let clusters = features::cluster_checkins(&checkins, 100.0, 2).unwrap();
    features::extract_dataset(
        &checkins,
        &clusters,
        &HashMap::new(),
        &PageRankParams::default(),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// Network oracles
// ---------------------------------------------------------------------------

/// Plain forward pass; returns the output and every pre-activation.
pub fn reference_forward(model: &MlpModel, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = x.to_vec();
    let mut pre_all = Vec::new();
    let last = model.layers.len() - 1;
    for (k, layer) in model.layers.iter().enumerate() {
        let n_in = layer.spec.input_size;
        let mut z = vec![0.0; layer.spec.output_size];
        for o in 0..layer.spec.output_size {
            let mut s = layer.biases[o];
            for i in 0..n_in {
                s += layer.weights[o * n_in + i] * a[i];
            }
            z[o] = s;
        }
        pre_all.extend_from_slice(&z);
        a = if k == last {
            z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
        } else {
            z.iter().map(|v| v.max(0.0)).collect()
        };
    }
    (a, pre_all)
}

pub const GRAD_H: f64 = 1e-5;
/// Denominator floor for relative error, so gradients that are zero on both
/// sides up to finite-difference noise do not count as mismatches.
pub const GRAD_REL_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_REL_FLOOR)
}

/// Max relative error between backprop and central differences for one
/// random network/batch drawn from `seed`.
pub fn gradient_check(seed: u64, outputs: usize, loss: LossKind) -> f64 {
    let mut r = rng(1000 + seed);
    let mut model = MlpModel::new(
        &home_net_spec(0.0, outputs),
        loss,
        OptimizerConfig::sgd(0.1),
        seed,
    )
    .unwrap();
    for layer in &mut model.layers {
        for b in &mut layer.biases {
            *b = r.gen_range(-0.2..0.2);
        }
    }
    // Redraw the batch until no ReLU sits within reach of its kink.
    let (xs, ys) = loop {
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..10).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        let clear = xs.iter().all(|x| {
            reference_forward(&model, x)
                .1
                .iter()
                .all(|z| z.abs() > 1e-3)
        });
        if clear {
            let ys: Vec<Vec<f64>> = (0..3)
                .map(|_| match (loss, outputs) {
                    (LossKind::Mse, _) => (0..outputs).map(|_| r.gen_range(0.0..1.0)).collect(),
                    (LossKind::CategoricalCrossEntropy, 1) => vec![1.0],
                    (LossKind::CategoricalCrossEntropy, _) => {
                        let hot = r.gen_range(0..outputs);
                        (0..outputs)
                            .map(|j| if j == hot { 1.0 } else { 0.0 })
                            .collect()
                    }
                })
                .collect();
            break (xs, ys);
        }
    };
    let analytic = model.batch_gradients(&xs, &ys, None).unwrap().1.flat();
    let mut worst: f64 = 0.0;
    for i in 0..model.n_params() {
        let p = model.param(i);
        model.set_param(i, p + GRAD_H);
        let up = model.mean_loss(&xs, &ys).unwrap();
        model.set_param(i, p - GRAD_H);
        let down = model.mean_loss(&xs, &ys).unwrap();
        model.set_param(i, p);
        let numeric = (up - down) / (2.0 * GRAD_H);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

// ---------------------------------------------------------------------------
// DBSCAN oracle
// ---------------------------------------------------------------------------

fn haversine_ref(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
    let dp = p2 - p1;
    let dl = (b.1 - a.1).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * 6_371_000.0 * h.sqrt().min(1.0).asin()
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Brute-force DBSCAN: union-find over core-core edges, border points take
/// the component of their lowest-index core neighbour, the rest is noise.
/// Labels are component representatives, not dense ids.
pub fn dbscan_reference(points: &[(f64, f64)], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let near = |i: usize, j: usize| haversine_ref(points[i], points[j]) <= eps;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near(i, j) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                Some(find(&mut parent, i))
            } else {
                (0..n)
                    .find(|&j| core[j] && near(i, j))
                    .map(|j| find(&mut parent, j))
            }
        })
        .collect()
}

/// Same partition (including the same noise set) up to relabeling.
pub fn same_partition<A: Ord + Copy, B: Ord + Copy>(a: &[Option<A>], b: &[Option<B>]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd: BTreeMap<A, B> = BTreeMap::new();
    let mut back: BTreeMap<B, A> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                if *fwd.entry(*x).or_insert(*y) != *y || *back.entry(*y).or_insert(*x) != *x {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

pub fn random_instance(r: &mut ChaCha8Rng) -> (Vec<(f64, f64)>, f64, usize) {
    let n = r.gen_range(0..=200);
    let centre = (r.gen_range(-70.0..70.0), r.gen_range(-179.0..179.0));
    // Blobs plus background so there are cores, borders and noise.
    let blobs: Vec<(f64, f64)> = (0..r.gen_range(1..6))
        .map(|_| {
            (
                centre.0 + r.gen_range(-0.01..0.01),
                centre.1 + r.gen_range(-0.01..0.01),
            )
        })
        .collect();
    let pts = (0..n)
        .map(|_| {
            if r.gen::<f64>() < 0.7 {
                let b = blobs[r.gen_range(0..blobs.len())];
                (
                    b.0 + r.gen_range(-0.001..0.001),
                    b.1 + r.gen_range(-0.001..0.001),
                )
            } else {
                (
                    centre.0 + r.gen_range(-0.015..0.015),
                    centre.1 + r.gen_range(-0.015..0.015),
                )
            }
        })
        .collect();
    (pts, r.gen_range(30.0..150.0), r.gen_range(1..=6))
}

// ---------------------------------------------------------------------------
// PageRank oracles
// ---------------------------------------------------------------------------

/// Dense power iteration run to machine precision.
pub fn pagerank_power_reference(n: usize, edges: &[(usize, usize, f64)], d: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for &(u, _, w) in edges {
        out[u] += w;
    }
    let mut m = vec![vec![0.0; n]; n]; // m[v][u]: probability u -> v
    for &(u, v, w) in edges {
        m[v][u] += w / out[u];
    }
    for u in 0..n {
        if out[u] == 0.0 {
            for row in m.iter_mut() {
                row[u] = 1.0 / n as f64;
            }
        }
    }
    let mut x = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let next: Vec<f64> = (0..n)
            .map(|v| (1.0 - d) / n as f64 + d * (0..n).map(|u| m[v][u] * x[u]).sum::<f64>())
            .collect();
        let diff: f64 = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = next;
        if diff < 1e-15 {
            break;
        }
    }
    x
}

/// Solves (I - d·M) x = (1 - d)/n · 1 by Gaussian elimination.
pub fn pagerank_linear_reference(n: usize, edges: &[(usize, usize, f64)], d: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for &(u, _, w) in edges {
        out[u] += w;
    }
    let mut a = vec![vec![0.0; n + 1]; n];
    for (v, row) in a.iter_mut().enumerate() {
        row[v] = 1.0;
        row[n] = (1.0 - d) / n as f64;
    }
    for &(u, v, w) in edges {
        a[v][u] -= d * w / out[u];
    }
    for u in 0..n {
        if out[u] == 0.0 {
            for row in a.iter_mut() {
                row[u] -= d / n as f64;
            }
        }
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

pub fn random_graph(r: &mut ChaCha8Rng) -> (Vec<u32>, Vec<(usize, usize, f64)>, TransitionGraph) {
    let n = r.gen_range(1..=12);
    let ids: Vec<u32> = {
        let mut s = BTreeSet::new();
        while s.len() < n {
            s.insert(r.gen_range(0..100u32));
        }
        s.into_iter().collect()
    };
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v && r.gen::<f64>() < 0.3 {
                edges.push((u, v, r.gen_range(1..5) as f64));
            }
        }
    }
    let graph = TransitionGraph::new(
        ids.clone(),
        edges.iter().map(|&(u, v, w)| ((ids[u], ids[v]), w)),
    )
    .unwrap();
    (ids, edges, graph)
}

pub fn precise_pagerank() -> PageRankParams {
    PageRankParams {
        damping: 0.85,
        tol: 1e-14,
        max_iter: 100_000,
    }
}

// ---------------------------------------------------------------------------
// Acceptance checks
// ---------------------------------------------------------------------------

pub fn criterion_1_gradients() -> Outcome {
    let started = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        for outputs in [1, 2] {
            for loss in [LossKind::Mse, LossKind::CategoricalCrossEntropy] {
                worst = worst.max(gradient_check(seed, outputs, loss));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        worst < 1e-4 && secs < 60.0,
        format!("max relative error {worst:.3e} over 20 seeds x 2 nets x 2 losses ({secs:.1}s)"),
    )
}

pub const RMSPROP_FIRST_STEP: f64 = -0.0031622775601683824;
pub const RMSPROP_SECOND_STEP: f64 = -0.0014744195180707116;

pub fn criterion_2_optimizers() -> Outcome {
    let mut p = [1.0];
    nn::sgd_step(&mut p, &[2.0], 0.1);
    let sgd_err = (p[0] - 0.8).abs();
    let mut lr0 = [1.5];
    nn::sgd_step(&mut lr0, &[3.0], 0.0);

    let mut s = [0.0];
    let mut q = [0.0];
    nn::rmsprop_step(&mut s, &mut q, &[1.0], 0.001, 0.9, 1e-8);
    let first_err = (q[0] - RMSPROP_FIRST_STEP).abs().max((s[0] - 0.1).abs());
    let before = q[0];
    nn::rmsprop_step(&mut s, &mut q, &[0.5], 0.001, 0.9, 1e-8);
    let second_err = ((q[0] - before) - RMSPROP_SECOND_STEP)
        .abs()
        .max((s[0] - 0.115).abs());
    let worst = sgd_err.max(first_err).max(second_err);
    Outcome::new(
        worst <= 1e-9 && lr0[0] == 1.5,
        format!(
            "sgd 1-0.1*2={}, rmsprop first step {:.10}, max error {worst:.1e}",
            p[0], before
        ),
    )
}

pub fn criterion_3_dbscan() -> Outcome {
    let started = std::time::Instant::now();
    let mut r = rng(3);
    let mut mismatches = 0;
    let mut total_points = 0;
    for _ in 0..50 {
        let (pts, eps, min_pts) = random_instance(&mut r);
        total_points += pts.len();
        let gp: Vec<GeoPoint> = pts
            .iter()
            .map(|&(lat, lon)| GeoPoint { lat, lon })
            .collect();
        let ours = geo::dbscan(&gp, eps, min_pts).unwrap();
        if !same_partition(&ours.labels, &dbscan_reference(&pts, eps, min_pts)) {
            mismatches += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        mismatches == 0 && secs < 60.0,
        format!("{mismatches} mismatching instances of 50 ({total_points} points, {secs:.1}s)"),
    )
}

pub fn criterion_4_pagerank() -> Outcome {
    let two = TransitionGraph::new([1, 2], [((1, 2), 1.0), ((2, 1), 1.0)]).unwrap();
    let pr2 = features::pagerank(&two, &PageRankParams::default());
    let sym_err = (pr2[&1] - 0.5).abs().max((pr2[&2] - 0.5).abs());

    let mut r = rng(4);
    let mut worst_sum: f64 = 0.0;
    let mut worst_power: f64 = 0.0;
    let mut worst_linear: f64 = 0.0;
    for _ in 0..200 {
        let (ids, edges, graph) = random_graph(&mut r);
        for scores in [
            features::pagerank(&graph, &PageRankParams::default()),
            features::reverse_pagerank(&graph, &PageRankParams::default()),
        ] {
            worst_sum = worst_sum.max((scores.values().sum::<f64>() - 1.0).abs());
        }
        let ours = features::pagerank(&graph, &precise_pagerank());
        let power = pagerank_power_reference(ids.len(), &edges, 0.85);
        let linear = pagerank_linear_reference(ids.len(), &edges, 0.85);
        for (k, id) in ids.iter().enumerate() {
            worst_power = worst_power.max((ours[id] - power[k]).abs());
            worst_linear = worst_linear.max((ours[id] - linear[k]).abs());
        }
    }
    Outcome::new(
        worst_sum <= 1e-9 && sym_err <= 1e-9 && worst_power <= 1e-9 && worst_linear <= 1e-9,
        format!(
            "2-cycle error {sym_err:.1e}, |sum-1| <= {worst_sum:.1e}, vs power oracle {worst_power:.1e}, vs linear solve {worst_linear:.1e}"
        ),
    )
}

/// Feature invariants on one dataset; returns a description of the first
/// violation.
pub fn feature_invariants(ds: &Dataset) -> Result<(), String> {
    for u in ds.users() {
        let total: f64 = ds.user_records(u).map(|r| r.features[0]).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(format!("user {u}: check-in ratios sum to {total}"));
        }
    }
    for r in ds.records() {
        for &f in &RATIO_FEATURES {
            if !(0.0..=1.0).contains(&r.features[f]) {
                return Err(format!(
                    "{}/{} feature {f} = {}",
                    r.user_id, r.cluster_id, r.features[f]
                ));
            }
        }
    }
    let norm = fit_norm(ds);
    let n = apply_norm(&norm, ds);
    for f in 0..data::N_FEATURES {
        let vals: Vec<f64> = n.records().iter().map(|r| r.features[f]).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let constant = norm.min[f] == norm.max[f];
        let ok = if constant {
            lo == 0.0 && hi == 0.0
        } else {
            lo == -1.0 && hi == 1.0
        };
        if !ok {
            return Err(format!("feature {f} normalizes to [{lo}, {hi}]"));
        }
        for (raw, scaled) in ds.records().iter().zip(n.records()) {
            let is_min = raw.features[f] == norm.min[f];
            let is_max = raw.features[f] == norm.max[f];
            if !constant
                && ((is_min && scaled.features[f] != -1.0) || (is_max && scaled.features[f] != 1.0))
            {
                return Err(format!("feature {f}: extreme value not mapped exactly"));
            }
        }
    }
    Ok(())
}

pub fn criterion_5_features() -> Outcome {
    let mut sets: Vec<(String, Dataset)> = (0..3)
        .map(|s| (format!("synthetic seed {s}"), synthetic_dataset(40, 60, s)))
        .collect();
    sets.extend((0..3).map(|s| {
        (
            format!("random check-ins seed {s}"),
            random_checkin_dataset(s),
        )
    }));
    let records: usize = sets.iter().map(|(_, d)| d.len()).sum();
    for (name, ds) in &sets {
        if let Err(e) = feature_invariants(ds) {
            return Outcome::new(false, format!("{name}: {e}"));
        }
    }
    Outcome::new(true, format!("{} datasets, {records} records", sets.len()))
}

pub fn threshold_grid_50() -> Vec<f64> {
    (0..50).map(|i| i as f64 / 49.0).collect()
}

pub fn criterion_6_monotonicity() -> Outcome {
    let train_raw = synthetic_dataset(150, 120, 6);
    let norm = fit_norm(&train_raw);
    let train = apply_norm(&norm, &train_raw);
    let test = apply_norm(&norm, &synthetic_dataset(100, 120, 60));
    let forest = ForestModel::fit(&train, &ForestParams::default(), 6).unwrap();
    let votes = forest.vote_fractions(&test);
    let mut prev: Option<(BTreeSet<usize>, f64, f64)> = None;
    for t in threshold_grid_50() {
        let kept: BTreeSet<usize> = (0..test.len()).filter(|&i| votes[i] >= t).collect();
        let (_, stats) = filter_by_votes(&test, &votes, t);
        if let Some((pk, pr, pf)) = &prev {
            if !kept.is_subset(pk) || stats.recall > *pr || stats.selected_fraction > *pf {
                return Outcome::new(false, format!("not nested at threshold {t}"));
            }
        }
        prev = Some((kept, stats.recall, stats.selected_fraction));
    }
    let (_, at_default) = filter_by_votes(&test, &votes, 0.002);
    Outcome::new(
        true,
        format!(
            "50 thresholds nested; at 0.002 recall {:.3}, kept {:.3} of {} records",
            at_default.recall,
            at_default.selected_fraction,
            test.len()
        ),
    )
}

pub fn criterion_7_end_to_end() -> Vec<(String, Outcome)> {
    let started = std::time::Instant::now();
    let ds = synthetic_dataset(500, 120, 42);
    let config = RunConfig::default();
    let report = evaluation::cross_validate(&ds, &config).unwrap();
    let secs = started.elapsed().as_secs_f64();

    let min_recall = report
        .folds
        .iter()
        .map(|f| f.phase1.recall)
        .fold(1.0, f64::min);
    let reduction = report.mean_records_per_user / report.mean_selected_per_user;
    let a = Outcome::new(
        report.mean_phase1_recall >= 0.90 && reduction >= 3.0,
        format!(
            "recall mean {:.4} (min fold {min_recall:.4}), records/user {:.1} -> {:.1} ({reduction:.1}x)",
            report.mean_phase1_recall, report.mean_records_per_user, report.mean_selected_per_user
        ),
    );
    let gain = report.mean_accuracy - report.mean_baseline_accuracy;
    let b = Outcome::new(
        report.mean_accuracy >= 0.78 && gain >= 0.05,
        format!(
            "accuracy {:.4} vs midnight baseline {:.4} (+{:.1} points)",
            report.mean_accuracy,
            report.mean_baseline_accuracy,
            100.0 * gain
        ),
    );
    let whole = report.mean_accuracy;
    let best = report
        .gate_curve
        .iter()
        .filter(|p| p.reported_fraction >= 0.10 && !p.empty)
        .max_by(|x, y| x.subset_accuracy.total_cmp(&y.subset_accuracy));
    let c = match best {
        Some(p) => Outcome::new(
            p.subset_accuracy >= whole + 0.05,
            format!(
                "gate {} reports {:.3} of users at subset accuracy {:.4} (whole {:.4})",
                p.threshold, p.reported_fraction, p.subset_accuracy, whole
            ),
        ),
        None => Outcome::new(false, "no gate threshold reports 10% of users"),
    };
    let violations: Vec<usize> = report
        .folds
        .iter()
        .filter(|f| f.accuracy > f.phase1.recall)
        .map(|f| f.fold)
        .collect();
    let d = Outcome::new(
        violations.is_empty(),
        format!(
            "per-fold accuracy/recall {}; {secs:.0}s",
            report
                .folds
                .iter()
                .map(|f| format!("{:.2}/{:.3}", f.accuracy, f.phase1.recall))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    );
    vec![
        ("7a phase-1 recall and reduction".into(), a),
        ("7b whole-population accuracy".into(), b),
        ("7c gated subset accuracy".into(), c),
        ("7d accuracy bounded by recall".into(), d),
    ]
}

/// Fits and predicts inside a pool of `threads` workers; returns the artifact
/// and prediction CSV bytes.
pub fn fit_predict_bytes(ds: &Dataset, config: &RunConfig, threads: usize) -> (Vec<u8>, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.json");
    let pred_path = dir.path().join("predictions.csv");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap();
    pool.install(|| {
        let (artifact, _) = pipeline::fit(ds, config, None).unwrap();
        artifact.save(&model_path).unwrap();
        let loaded = pipeline::PipelineArtifact::load(&model_path).unwrap();
        let preds = loaded.predict_all(ds).unwrap();
        data::write_predictions(&preds, &pred_path, Some(&Provenance::new(config.hash()))).unwrap();
    });
    (
        std::fs::read(&model_path).unwrap(),
        std::fs::read(&pred_path).unwrap(),
    )
}

pub fn criterion_8_reproducibility() -> Outcome {
    let ds = synthetic_dataset(120, 120, 8);
    let config = RunConfig {
        seed: 8,
        ..RunConfig::default()
    };
    let (m1, p1) = fit_predict_bytes(&ds, &config, 1);
    let (m2, p2) = fit_predict_bytes(&ds, &config, 3);
    Outcome::new(
        m1 == m2 && p1 == p2,
        format!(
            "artifact {} bytes, predictions {} bytes; identical across runs with 1 and 3 threads: {}",
            m1.len(),
            p1.len(),
            m1 == m2 && p1 == p2
        ),
    )
}
