//! User-grouped cross-validation, accuracy metrics, sweeps and ablations.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{feature, Dataset, HomePrediction, LocationRecord};
use crate::error::{Error, Result};
use crate::forest::{filter_by_votes, FilterStats, ForestModel};
use crate::nn::{self, MlpModel};
use crate::pipeline::{self, default_gate_grid, gate_curve, select_home, GatePoint, StageTimings};
use crate::preprocess::{
    apply_norm, apply_norm_clamped, fit_norm, split_folds, FoldPlan, NormParams,
};
use crate::rng::{derive_seed, tags};

/// Fraction of predictions whose cluster is the true home; UNKNOWN is wrong.
pub fn home_accuracy(predictions: &[HomePrediction], truth: &HashMap<String, u32>) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .filter(|p| {
            p.predicted_cluster.is_some() && p.predicted_cluster == truth.get(&p.user_id).copied()
        })
        .count();
    correct as f64 / predictions.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub reported_fraction: f64,
    /// Over reported users only; 0 when `empty`.
    pub accuracy: f64,
    pub empty: bool,
}

pub fn subset_accuracy(
    predictions: &[HomePrediction],
    truth: &HashMap<String, u32>,
) -> SubsetAccuracy {
    let reported: Vec<&HomePrediction> = predictions
        .iter()
        .filter(|p| p.reported && p.predicted_cluster.is_some())
        .collect();
    let correct = reported
        .iter()
        .filter(|p| p.predicted_cluster == truth.get(&p.user_id).copied())
        .count();
    SubsetAccuracy {
        reported_fraction: if predictions.is_empty() {
            0.0
        } else {
            reported.len() as f64 / predictions.len() as f64
        },
        accuracy: if reported.is_empty() {
            0.0
        } else {
            correct as f64 / reported.len() as f64
        },
        empty: reported.is_empty(),
    }
}

/// Picks, per user, the record maximizing `score`; ties go to the lowest
/// cluster id. Every user gets a reported prediction.
pub fn argmax_predictions(
    dataset: &Dataset,
    mut score: impl FnMut(usize, &LocationRecord) -> f64,
) -> Vec<HomePrediction> {
    dataset
        .users()
        .iter()
        .map(|u| {
            let mut best: Option<(u32, f64)> = None;
            for &i in dataset.user_indices(u) {
                let r = &dataset.records()[i];
                let s = score(i, r);
                let better = match best {
                    None => true,
                    Some((c, bs)) => s > bs || (s == bs && r.cluster_id < c),
                };
                if better {
                    best = Some((r.cluster_id, s));
                }
            }
            HomePrediction {
                user_id: u.clone(),
                predicted_cluster: best.map(|b| b.0),
                dnnr_score: best.map_or(0.0, |b| b.1),
                dnnc_score: None,
                reported: best.is_some(),
            }
        })
        .collect()
}

/// Baseline: the location with the highest midnight ratio.
pub fn midnight_baseline(dataset: &Dataset) -> Vec<HomePrediction> {
    argmax_predictions(dataset, |_, r| r.features[feature::MIDNIGHT_RATIO])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train_users: usize,
    pub n_test_users: usize,
    /// Phase-1 filter on the held-out users.
    pub phase1: FilterStats,
    /// Whole-population DNN-R accuracy on held-out users.
    pub accuracy: f64,
    pub baseline_accuracy: f64,
    pub gate_curve: Vec<GatePoint>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldReport>,
    pub mean_phase1_recall: f64,
    pub mean_selected_fraction: f64,
    pub mean_records_per_user: f64,
    pub mean_selected_per_user: f64,
    pub mean_accuracy: f64,
    pub mean_baseline_accuracy: f64,
    /// Gate curve with counts pooled over folds.
    pub gate_curve: Vec<GatePoint>,
    pub timings: StageTimings,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Fold plan for a labeled dataset under `config`.
pub fn plan_folds(dataset: &Dataset, config: &RunConfig) -> Result<FoldPlan> {
    split_folds(
        dataset.users(),
        config.folds,
        derive_seed(config.seed, tags::FOLDS),
    )
}

/// Normalization shared by all folds unless `strict_leakage` is set.
fn global_norm(dataset: &Dataset, config: &RunConfig) -> Option<NormParams> {
    (!config.strict_leakage).then(|| fit_norm(dataset))
}

fn check_labeled(dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    dataset.validate_labeled()
}

pub fn cross_validate(dataset: &Dataset, config: &RunConfig) -> Result<EvalReport> {
    cross_validate_with(dataset, config, &default_gate_grid())
}

/// k-fold CV with user-disjoint folds: every fold fits the whole pipeline on
/// the other folds and evaluates on its own users.
pub fn cross_validate_with(
    dataset: &Dataset,
    config: &RunConfig,
    thresholds: &[f64],
) -> Result<EvalReport> {
    config.validate()?;
    check_labeled(dataset)?;
    let plan = plan_folds(dataset, config)?;
    let norm = global_norm(dataset, config);
    let truth = dataset.home_clusters();

    let mut folds = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let (train, test) = plan.partition(dataset, fold);
        let (artifact, fit_report) = pipeline::fit(&train, config, norm.clone())?;
        let (predictions, phase1) = artifact.predict_with_stats(&test)?;
        folds.push(FoldReport {
            fold,
            n_train_users: train.n_users(),
            n_test_users: test.n_users(),
            phase1,
            accuracy: home_accuracy(&predictions, &truth),
            baseline_accuracy: home_accuracy(&midnight_baseline(&test), &truth),
            gate_curve: gate_curve(&predictions, &truth, thresholds),
            timings: fit_report.timings,
        });
    }

    let gate_curve = (0..thresholds.len())
        .map(|i| GatePoint::pool(&folds.iter().map(|f| f.gate_curve[i]).collect::<Vec<_>>()))
        .collect();
    let mut timings = StageTimings::default();
    folds.iter().for_each(|f| timings.add(&f.timings));
    Ok(EvalReport {
        k: plan.k,
        seed: config.seed,
        mean_phase1_recall: mean(folds.iter().map(|f| f.phase1.recall)),
        mean_selected_fraction: mean(folds.iter().map(|f| f.phase1.selected_fraction)),
        mean_records_per_user: mean(folds.iter().map(|f| f.phase1.mean_records_per_user)),
        mean_selected_per_user: mean(folds.iter().map(|f| f.phase1.mean_selected_per_user)),
        mean_accuracy: mean(folds.iter().map(|f| f.accuracy)),
        mean_baseline_accuracy: mean(folds.iter().map(|f| f.baseline_accuracy)),
        gate_curve,
        timings,
        folds,
    })
}

/// Per-fold state after phase 1, reused by sweeps that retrain only the
/// second phase.
pub struct PreparedFold {
    pub fold: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub filtered_train: Dataset,
    pub test_votes: Vec<f64>,
    pub forest: ForestModel,
    pub forest_s: f64,
}

pub fn prepare_folds(dataset: &Dataset, config: &RunConfig) -> Result<Vec<PreparedFold>> {
    config.validate()?;
    check_labeled(dataset)?;
    let plan = plan_folds(dataset, config)?;
    let global = global_norm(dataset, config);
    (0..plan.k)
        .map(|fold| {
            let (train_raw, test_raw) = plan.partition(dataset, fold);
            let (train, test) = match &global {
                Some(n) => (apply_norm(n, &train_raw), apply_norm(n, &test_raw)),
                None => {
                    let n = fit_norm(&train_raw);
                    (
                        apply_norm_clamped(&n, &train_raw),
                        apply_norm_clamped(&n, &test_raw),
                    )
                }
            };
            let started = Instant::now();
            let forest = ForestModel::fit(
                &train,
                &config.forest,
                derive_seed(config.seed, tags::FOREST),
            )?;
            let forest_s = started.elapsed().as_secs_f64();
            let train_votes = forest.vote_fractions(&train);
            let (filtered_train, _) =
                filter_by_votes(&train, &train_votes, config.forest.threshold);
            let test_votes = forest.vote_fractions(&test);
            Ok(PreparedFold {
                fold,
                train,
                test,
                filtered_train,
                test_votes,
                forest,
                forest_s,
            })
        })
        .collect()
}

impl PreparedFold {
    /// Test records surviving phase 1.
    pub fn test_survivors(&self, threshold: f64) -> Dataset {
        self.test
            .filter_records(|i, _| self.test_votes[i] >= threshold)
    }
}

/// DNN-R argmax per user over `dataset`; users with no records are UNKNOWN.
pub fn dnnr_predictions(
    dnnr: &MlpModel,
    users: &[String],
    dataset: &Dataset,
) -> Result<Vec<HomePrediction>> {
    users
        .iter()
        .map(|u| {
            let recs: Vec<&LocationRecord> = dataset.user_records(u).collect();
            Ok(match select_home(dnnr, &recs)? {
                Some((i, s)) => HomePrediction {
                    user_id: u.clone(),
                    predicted_cluster: Some(recs[i].cluster_id),
                    dnnr_score: s,
                    dnnc_score: None,
                    reported: true,
                },
                None => HomePrediction::unknown(u.clone()),
            })
        })
        .collect()
}

/// Attaches DNN-C scores to chosen records and applies the gate.
fn gate_with(
    dnnc: &MlpModel,
    dataset: &Dataset,
    predictions: &mut [HomePrediction],
    threshold: f64,
) -> Result<()> {
    for p in predictions.iter_mut() {
        if let Some(c) = p.predicted_cluster {
            let r = dataset
                .user_records(&p.user_id)
                .find(|r| r.cluster_id == c)
                .ok_or_else(|| Error::Validation(format!("missing record {} / {c}", p.user_id)))?;
            let s = nn::home_probability(&dnnc.predict(&r.features)?);
            p.dnnc_score = Some(s);
            p.reported = s >= threshold;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    ForestOnly,
    DnnrOnly,
    DnncOnly,
    DnnrDnnc,
    FullPipeline,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::ForestOnly,
        AblationVariant::DnnrOnly,
        AblationVariant::DnncOnly,
        AblationVariant::DnnrDnnc,
        AblationVariant::FullPipeline,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::ForestOnly => "forest-only",
            AblationVariant::DnnrOnly => "dnnr-only",
            AblationVariant::DnncOnly => "dnnc-only",
            AblationVariant::DnnrDnnc => "dnnr+dnnc",
            AblationVariant::FullPipeline => "full-pipeline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    /// Argmax choice correct over all users (gate ignored, UNKNOWN wrong).
    pub accuracy: f64,
    pub reported_fraction: f64,
    pub subset_accuracy: f64,
    /// Wall-clock training time summed over folds.
    pub train_s: f64,
}

#[derive(Default)]
struct AblationAcc {
    accuracy: Vec<f64>,
    subset: Vec<(usize, usize, usize)>,
    train_s: f64,
}

impl AblationAcc {
    fn push(&mut self, preds: &[HomePrediction], truth: &HashMap<String, u32>, train_s: f64) {
        self.accuracy.push(home_accuracy(preds, truth));
        let reported: Vec<&HomePrediction> = preds
            .iter()
            .filter(|p| p.reported && p.predicted_cluster.is_some())
            .collect();
        let correct = reported
            .iter()
            .filter(|p| p.predicted_cluster == truth.get(&p.user_id).copied())
            .count();
        self.subset.push((preds.len(), reported.len(), correct));
        self.train_s += train_s;
    }

    fn row(&self, variant: AblationVariant) -> AblationRow {
        let users: usize = self.subset.iter().map(|s| s.0).sum();
        let reported: usize = self.subset.iter().map(|s| s.1).sum();
        let correct: usize = self.subset.iter().map(|s| s.2).sum();
        AblationRow {
            variant,
            accuracy: mean(self.accuracy.iter().copied()),
            reported_fraction: if users == 0 {
                0.0
            } else {
                reported as f64 / users as f64
            },
            subset_accuracy: if reported == 0 {
                0.0
            } else {
                correct as f64 / reported as f64
            },
            train_s: self.train_s,
        }
    }
}

/// Component ablation under the same folds as [`cross_validate`].
pub fn ablate(dataset: &Dataset, config: &RunConfig) -> Result<Vec<AblationRow>> {
    let truth = dataset.home_clusters();
    let mut acc: Vec<AblationAcc> = AblationVariant::ALL
        .iter()
        .map(|_| AblationAcc::default())
        .collect();
    for f in prepare_folds(dataset, config)? {
        let users = f.test.users().to_vec();

        let forest_preds = argmax_predictions(&f.test, |i, _| f.test_votes[i]);
        acc[0].push(&forest_preds, &truth, f.forest_s);

        let started = Instant::now();
        let dnnr_all =
            pipeline::train_dnnr(&f.train, &config.dnnr, derive_seed(config.seed, tags::DNNR))?;
        let dnnr_all_s = started.elapsed().as_secs_f64();
        let dnnr_preds = dnnr_predictions(&dnnr_all, &users, &f.test)?;
        acc[1].push(&dnnr_preds, &truth, dnnr_all_s);

        let started = Instant::now();
        let dnnc_all =
            pipeline::train_dnnc(&f.train, &config.dnnc, derive_seed(config.seed, tags::DNNC))?;
        let dnnc_all_s = started.elapsed().as_secs_f64();
        let mut dnnc_preds = argmax_predictions(&f.test, |_, r| {
            dnnc_all
                .predict(&r.features)
                .map_or(f64::NEG_INFINITY, |o| nn::home_probability(&o))
        });
        for p in &mut dnnc_preds {
            p.dnnc_score = Some(p.dnnr_score);
            p.dnnr_score = 0.0;
        }
        acc[2].push(&dnnc_preds, &truth, dnnc_all_s);

        let mut combo = dnnr_preds.clone();
        gate_with(&dnnc_all, &f.test, &mut combo, config.gate_threshold)?;
        acc[3].push(&combo, &truth, dnnr_all_s + dnnc_all_s);

        let started = Instant::now();
        let dnnr = pipeline::train_dnnr(
            &f.filtered_train,
            &config.dnnr,
            derive_seed(config.seed, tags::DNNR),
        )?;
        let dnnc = pipeline::train_dnnc(
            &f.filtered_train,
            &config.dnnc,
            derive_seed(config.seed, tags::DNNC),
        )?;
        let phase2_s = started.elapsed().as_secs_f64();
        let survivors = f.test_survivors(config.forest.threshold);
        let mut full = dnnr_predictions(&dnnr, &users, &survivors)?;
        gate_with(&dnnc, &survivors, &mut full, config.gate_threshold)?;
        acc[4].push(&full, &truth, f.forest_s + phase2_s);
    }
    Ok(AblationVariant::ALL
        .iter()
        .zip(&acc)
        .map(|(v, a)| a.row(*v))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
}

fn sweep_dnnr(
    dataset: &Dataset,
    config: &RunConfig,
    values: &[f64],
    apply: impl Fn(&mut RunConfig, f64),
) -> Result<Vec<SweepPoint>> {
    let truth = dataset.home_clusters();
    let folds = prepare_folds(dataset, config)?;
    values
        .iter()
        .map(|&v| {
            let mut cfg = config.clone();
            apply(&mut cfg, v);
            cfg.validate()?;
            let fold_accuracies = folds
                .iter()
                .map(|f| {
                    let dnnr = pipeline::train_dnnr(
                        &f.filtered_train,
                        &cfg.dnnr,
                        derive_seed(cfg.seed, tags::DNNR),
                    )?;
                    let survivors = f.test_survivors(cfg.forest.threshold);
                    let preds = dnnr_predictions(&dnnr, f.test.users(), &survivors)?;
                    Ok(home_accuracy(&preds, &truth))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(SweepPoint {
                value: v,
                mean_accuracy: mean(fold_accuracies.iter().copied()),
                fold_accuracies,
            })
        })
        .collect()
}

/// Whole-population DNN-R accuracy per DNN-R dropout rate.
pub fn sweep_dropout(
    dataset: &Dataset,
    config: &RunConfig,
    rates: &[f64],
) -> Result<Vec<SweepPoint>> {
    sweep_dnnr(dataset, config, rates, |c, r| c.dnnr.dropout = r)
}

/// Whole-population DNN-R accuracy per epoch count.
pub fn sweep_epochs(
    dataset: &Dataset,
    config: &RunConfig,
    epochs: &[usize],
) -> Result<Vec<SweepPoint>> {
    let values: Vec<f64> = epochs.iter().map(|&e| e as f64).collect();
    sweep_dnnr(dataset, config, &values, |c, e| c.dnnr.epochs = e as usize)
}
