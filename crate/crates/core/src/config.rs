//! Run configuration: every hyperparameter of every stage, with defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Provenance;
use crate::error::{Error, Result};
use crate::features::PageRankParams;
use crate::forest::ForestParams;
use crate::nn::{OptimizerConfig, DNNC_DROPOUT, DNNR_DROPOUT};

/// First 16 hex digits of the SHA-256 of the compact JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    hex::encode(digest)[..16].to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbscanParams {
    pub eps_m: f64,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams {
            eps_m: 100.0,
            min_pts: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetParams {
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl NetParams {
    pub fn dnnr_default() -> Self {
        NetParams {
            dropout: DNNR_DROPOUT,
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::sgd(0.1),
        }
    }

    pub fn dnnc_default() -> Self {
        NetParams {
            dropout: DNNC_DROPOUT,
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::rmsprop(0.001),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "{name}.dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!(
                "{name}.batch_size must be at least 1"
            )));
        }
        self.optimizer.validate()
    }
}

fn dnnr_default() -> NetParams {
    NetParams::dnnr_default()
}

fn dnnc_default() -> NetParams {
    NetParams::dnnc_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dbscan: DbscanParams,
    pub pagerank: PageRankParams,
    pub forest: ForestParams,
    #[serde(default = "dnnr_default")]
    pub dnnr: NetParams,
    #[serde(default = "dnnc_default")]
    pub dnnc: NetParams,
    /// Minimum DNN-C home probability for a prediction to be reported.
    pub gate_threshold: f64,
    pub folds: usize,
    /// Fit normalization on training users only and clamp held-out values.
    pub strict_leakage: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            dbscan: DbscanParams::default(),
            pagerank: PageRankParams::default(),
            forest: ForestParams::default(),
            dnnr: NetParams::dnnr_default(),
            dnnc: NetParams::dnnc_default(),
            gate_threshold: 0.5,
            folds: 5,
            strict_leakage: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dbscan.eps_m > 0.0) || self.dbscan.min_pts == 0 {
            return Err(Error::Config(
                "dbscan needs eps_m > 0 and min_pts >= 1".into(),
            ));
        }
        self.pagerank.validate()?;
        self.forest.validate()?;
        self.dnnr.validate("dnnr")?;
        self.dnnc.validate("dnnc")?;
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err(Error::Config(format!(
                "gate_threshold {} outside [0, 1]",
                self.gate_threshold
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.hash())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_operating_point() {
        let c = RunConfig::default();
        assert_eq!(c.forest.n_trees, 500);
        assert_eq!(c.forest.threshold, 0.002);
        assert_eq!(c.forest.feature_subset_size, 3);
        assert_eq!(c.dnnr.epochs, 50);
        assert_eq!(c.dnnr.dropout, 0.30);
        assert_eq!(c.dnnc.dropout, 0.20);
        assert_eq!(c.dnnr.batch_size, 32);
        assert_eq!(c.dbscan.eps_m, 100.0);
        assert_eq!(c.dbscan.min_pts, 2);
        assert_eq!(c.folds, 5);
        assert!(
            matches!(c.dnnr.optimizer, OptimizerConfig::Sgd { learning_rate } if learning_rate == 0.1)
        );
        assert!(matches!(
            c.dnnc.optimizer,
            OptimizerConfig::RmsProp { learning_rate, rho, epsilon }
                if learning_rate == 0.001 && rho == 0.9 && epsilon == 1e-8
        ));
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 7, "forest": {"n_trees": 10}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.forest.n_trees, 10);
        assert_eq!(c.forest.threshold, 0.002);
        assert_eq!(c.dnnc, NetParams::dnnc_default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 7}"#).is_err());
        assert!(RunConfig::from_json(r#"{"forest": {"trees": 7}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"gate_threshold": 2.0}"#).is_err());
    }

    #[test]
    fn round_trip_and_hash() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let other = RunConfig {
            seed: 1,
            ..c.clone()
        };
        assert_ne!(other.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
    }
}
