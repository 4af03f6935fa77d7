//! The two-phase predictor.
//!
//! Records are normalized, pruned by the forest filter, and the survivors of
//! each user are scored by DNN-R; the best-scoring record is the candidate
//! home. DNN-C scores that candidate and the user is reported only when the
//! normalized home probability reaches the gate threshold.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{NetParams, RunConfig};
use crate::data::{Dataset, HomePrediction, LocationRecord};
use crate::error::{Error, Result};
use crate::forest::{filter_by_votes, FilterStats, ForestModel};
use crate::matrix::Matrix;
use crate::nn::{self, home_net_spec, LossKind, MlpModel, TrainParams};
use crate::preprocess::{apply_norm, apply_norm_clamped, fit_norm, NormParams};
use crate::rng::{derive_seed, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineArtifact {
    pub tool_version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub norm: NormParams,
    /// Clamp normalized inputs to `[-1, 1]` at prediction time.
    pub clamp_inputs: bool,
    pub forest: ForestModel,
    pub dnnr: MlpModel,
    pub dnnc: MlpModel,
    pub phase1_threshold: f64,
    pub gate_threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub forest_s: f64,
    pub dnnr_s: f64,
    pub dnnc_s: f64,
}

impl StageTimings {
    pub fn add(&mut self, other: &StageTimings) {
        self.forest_s += other.forest_s;
        self.dnnr_s += other.dnnr_s;
        self.dnnc_s += other.dnnc_s;
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub phase1: FilterStats,
    pub timings: StageTimings,
}

fn dnnr_targets(ds: &Dataset) -> Matrix {
    Matrix::from_vec(
        ds.records()
            .iter()
            .map(|r| f64::from(u8::from(r.is_home)))
            .collect(),
        1,
    )
}

fn dnnc_targets(ds: &Dataset) -> Matrix {
    Matrix::from_vec(
        ds.records()
            .iter()
            .flat_map(|r| if r.is_home { [0.0, 1.0] } else { [1.0, 0.0] })
            .collect(),
        2,
    )
}

fn train_net(
    ds: &Dataset,
    params: &NetParams,
    outputs: usize,
    loss: LossKind,
    seed: u64,
) -> Result<MlpModel> {
    let x = Matrix::from_rows(&ds.feature_rows());
    let y = match loss {
        LossKind::Mse => dnnr_targets(ds),
        LossKind::CategoricalCrossEntropy => dnnc_targets(ds),
    };
    nn::train(
        &home_net_spec(params.dropout, outputs),
        loss,
        params.optimizer,
        &x,
        &y,
        TrainParams {
            epochs: params.epochs,
            batch_size: params.batch_size,
            seed,
        },
    )
}

/// Regression network on `is_home` as 0/1 with MSE.
pub fn train_dnnr(ds: &Dataset, params: &NetParams, seed: u64) -> Result<MlpModel> {
    train_net(ds, params, 1, LossKind::Mse, seed)
}

/// Two-output {not-home, home} classifier with categorical cross-entropy.
pub fn train_dnnc(ds: &Dataset, params: &NetParams, seed: u64) -> Result<MlpModel> {
    train_net(ds, params, 2, LossKind::CategoricalCrossEntropy, seed)
}

fn check_trainable(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Validation(
            "phase-1 filter left no training records".into(),
        ));
    }
    let homes = ds.n_homes();
    if homes == 0 || homes == ds.len() {
        return Err(Error::Validation(
            "phase-1 filtered training set contains a single class".into(),
        ));
    }
    Ok(())
}

/// Normalizes `train` and trains every component on it. `norm` supplies
/// externally fitted normalization; otherwise it is fitted on `train`.
pub fn fit(
    train: &Dataset,
    config: &RunConfig,
    norm: Option<NormParams>,
) -> Result<(PipelineArtifact, FitReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let norm = norm.unwrap_or_else(|| fit_norm(train));
    norm.validate()?;
    let clamp_inputs = config.strict_leakage;
    let normalized = if clamp_inputs {
        apply_norm_clamped(&norm, train)
    } else {
        apply_norm(&norm, train)
    };

    let started = Instant::now();
    let forest = ForestModel::fit(
        &normalized,
        &config.forest,
        derive_seed(config.seed, tags::FOREST),
    )?;
    let forest_s = started.elapsed().as_secs_f64();

    let votes = forest.vote_fractions(&normalized);
    let (filtered, phase1) = filter_by_votes(&normalized, &votes, config.forest.threshold);
    check_trainable(&filtered)?;

    let started = Instant::now();
    let dnnr = train_dnnr(
        &filtered,
        &config.dnnr,
        derive_seed(config.seed, tags::DNNR),
    )?;
    let dnnr_s = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let dnnc = train_dnnc(
        &filtered,
        &config.dnnc,
        derive_seed(config.seed, tags::DNNC),
    )?;
    let dnnc_s = started.elapsed().as_secs_f64();

    let artifact = PipelineArtifact {
        tool_version: crate::VERSION.to_string(),
        config_hash: config.hash(),
        config: config.clone(),
        norm,
        clamp_inputs,
        forest,
        dnnr,
        dnnc,
        phase1_threshold: config.forest.threshold,
        gate_threshold: config.gate_threshold,
    };
    Ok((
        artifact,
        FitReport {
            phase1,
            timings: StageTimings {
                forest_s,
                dnnr_s,
                dnnc_s,
            },
        },
    ))
}

/// Index (into `records`) and score of the highest DNN-R output; ties go to
/// the lowest cluster id.
pub fn select_home(dnnr: &MlpModel, records: &[&LocationRecord]) -> Result<Option<(usize, f64)>> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        let s = dnnr.predict(&r.features)?[0];
        let better = match best {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && r.cluster_id < records[b].cluster_id),
        };
        if better {
            best = Some((i, s));
        }
    }
    Ok(best)
}

/// Whether a DNN-C score passes the gate.
pub fn passes_gate(dnnc_score: Option<f64>, threshold: f64) -> bool {
    dnnc_score.is_some_and(|s| s >= threshold)
}

impl PipelineArtifact {
    pub fn normalize(&self, dataset: &Dataset) -> Dataset {
        if self.clamp_inputs {
            apply_norm_clamped(&self.norm, dataset)
        } else {
            apply_norm(&self.norm, dataset)
        }
    }

    fn predict_survivors(
        &self,
        user_id: &str,
        survivors: &[&LocationRecord],
    ) -> Result<HomePrediction> {
        let Some((i, dnnr_score)) = select_home(&self.dnnr, survivors)? else {
            return Ok(HomePrediction::unknown(user_id));
        };
        let chosen = survivors[i];
        let dnnc_score = nn::home_probability(&self.dnnc.predict(&chosen.features)?);
        Ok(HomePrediction {
            user_id: user_id.to_string(),
            predicted_cluster: Some(chosen.cluster_id),
            dnnr_score,
            dnnc_score: Some(dnnc_score),
            reported: dnnc_score >= self.gate_threshold,
        })
    }

    /// Prediction for one user from that user's normalized records.
    pub fn predict_user(
        &self,
        user_id: &str,
        records: &[&LocationRecord],
    ) -> Result<HomePrediction> {
        let survivors: Vec<&LocationRecord> = records
            .iter()
            .copied()
            .filter(|r| self.forest.vote_fraction(&r.features) >= self.phase1_threshold)
            .collect();
        self.predict_survivors(user_id, &survivors)
    }

    /// Predictions for every user of a raw dataset (normalized here), in
    /// dataset user order, with the phase-1 statistics of that dataset.
    pub fn predict_with_stats(
        &self,
        dataset: &Dataset,
    ) -> Result<(Vec<HomePrediction>, FilterStats)> {
        let normalized = self.normalize(dataset);
        let votes = self.forest.vote_fractions(&normalized);
        let (_, stats) = filter_by_votes(&normalized, &votes, self.phase1_threshold);
        let predictions = normalized
            .users()
            .par_iter()
            .map(|u| {
                let survivors: Vec<&LocationRecord> = normalized
                    .user_indices(u)
                    .iter()
                    .filter(|&&i| votes[i] >= self.phase1_threshold)
                    .map(|&i| &normalized.records()[i])
                    .collect();
                self.predict_survivors(u, &survivors)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((predictions, stats))
    }

    pub fn predict_all(&self, dataset: &Dataset) -> Result<Vec<HomePrediction>> {
        self.predict_with_stats(dataset).map(|(p, _)| p)
    }

    /// Gate trade-off curve on a labeled raw dataset. DNN-R choices are
    /// computed once and only the gate moves.
    pub fn sweep_gate(&self, dataset: &Dataset, thresholds: &[f64]) -> Result<Vec<GatePoint>> {
        let predictions = self.predict_all(dataset)?;
        Ok(gate_curve(
            &predictions,
            &dataset.home_clusters(),
            thresholds,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let artifact: PipelineArtifact = serde_json::from_str(&text)?;
        artifact.validate()?;
        Ok(artifact)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.norm.validate()?;
        self.forest.validate()?;
        self.dnnr.validate()?;
        self.dnnc.validate()?;
        if self.dnnr.output_size() != 1 || self.dnnc.output_size() != 2 {
            return Err(Error::Validation(
                "artifact networks have the wrong output widths".into(),
            ));
        }
        for t in [self.phase1_threshold, self.gate_threshold] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Validation(format!("threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One point of the reported-fraction / subset-accuracy trade-off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatePoint {
    pub threshold: f64,
    pub n_users: usize,
    pub n_reported: usize,
    pub n_correct: usize,
    pub reported_fraction: f64,
    /// Accuracy over reported users; 0 when `empty`.
    pub subset_accuracy: f64,
    pub empty: bool,
}

impl GatePoint {
    fn from_counts(threshold: f64, n_users: usize, n_reported: usize, n_correct: usize) -> Self {
        GatePoint {
            threshold,
            n_users,
            n_reported,
            n_correct,
            reported_fraction: if n_users == 0 {
                0.0
            } else {
                n_reported as f64 / n_users as f64
            },
            subset_accuracy: if n_reported == 0 {
                0.0
            } else {
                n_correct as f64 / n_reported as f64
            },
            empty: n_reported == 0,
        }
    }

    /// Sums counts of points sharing a threshold.
    pub fn pool(points: &[GatePoint]) -> GatePoint {
        let threshold = points.first().map_or(0.0, |p| p.threshold);
        GatePoint::from_counts(
            threshold,
            points.iter().map(|p| p.n_users).sum(),
            points.iter().map(|p| p.n_reported).sum(),
            points.iter().map(|p| p.n_correct).sum(),
        )
    }
}

/// Re-gates fixed predictions at each threshold.
pub fn gate_curve(
    predictions: &[HomePrediction],
    truth: &HashMap<String, u32>,
    thresholds: &[f64],
) -> Vec<GatePoint> {
    thresholds
        .iter()
        .map(|&t| {
            let mut reported = 0;
            let mut correct = 0;
            for p in predictions {
                if p.predicted_cluster.is_some() && passes_gate(p.dnnc_score, t) {
                    reported += 1;
                    if p.predicted_cluster == truth.get(&p.user_id).copied() {
                        correct += 1;
                    }
                }
            }
            GatePoint::from_counts(t, predictions.len(), reported, correct)
        })
        .collect()
}

/// `start:stop:step` inclusive grid, e.g. `0:1:0.01`.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || {
        Error::Config(format!(
            "bad threshold grid `{spec}`, expected start:stop:step"
        ))
    };
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !(step > 0.0) || !(stop >= start) || !stop.is_finite() {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    // Snap to 1e-9 so 0.35 stays 0.35 rather than 0.35000000000000003.
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

/// 0, 0.01, ..., 1.
pub fn default_gate_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}
