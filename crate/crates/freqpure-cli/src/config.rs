//! Run configuration: one TOML file describing every stage, plus the
//! command-line overrides and the canonical hash that identifies artifacts
//! produced under a given configuration.

use freqpure::io::sha256_hex;
use freqpure::{AttackConfig, EvalPlan, PurifyConfig, ToyDatasetSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Epoch counts and optimizer settings for the two toy models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub classifier_epochs: usize,
    pub score_epochs: usize,
    pub score_features: usize,
    pub score_batch_size: usize,
    pub score_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            classifier_epochs: 30,
            score_epochs: 8,
            score_features: 12,
            score_batch_size: 32,
            score_learning_rate: 1e-3,
        }
    }
}

/// Optional external checkpoint manifests; when set they replace the
/// locally trained weights for the matching role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExternalModels {
    pub classifier: Option<PathBuf>,
    pub score: Option<PathBuf>,
}

/// The full run configuration. Every field has a default, so a config file
/// only needs the entries it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Master seed: training randomness; also the purification seed unless
    /// `[purify] seed` pins its own.
    pub seed: u64,
    /// Bin count for exported radial spectrum histograms.
    pub histogram_bins: usize,
    pub dataset: ToyDatasetSpec,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    pub purify: PurifyConfig,
    pub eval: EvalPlan,
    pub external: ExternalModels,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/toy"),
            workers: 1,
            seed: 7,
            histogram_bins: 32,
            dataset: ToyDatasetSpec::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::default(),
            purify: PurifyConfig::default(),
            eval: EvalPlan::default(),
            external: ExternalModels::default(),
        }
    }
}

/// Values given as flags; applied to the loaded config *before* hashing so
/// the hash always describes what actually ran.
#[derive(Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub t_star: Option<f64>,
    pub dt: Option<f64>,
    pub lambda: Option<f64>,
}

impl RunConfig {
    /// Loads the file when given, otherwise starts from defaults.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, String> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                toml::from_str(&text).map_err(|e| format!("config {}: {e}", p.display()))
            }
        }
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(out) = &ov.out {
            self.out_dir = out.clone();
        }
        if let Some(seed) = ov.seed {
            self.seed = seed;
            self.purify.seed = seed;
        }
        if let Some(workers) = ov.workers {
            self.workers = workers;
        }
        if let Some(t_star) = ov.t_star {
            self.purify.t_star = t_star;
            self.eval.t_star_list = vec![t_star];
        }
        if let Some(dt) = ov.dt {
            self.purify.dt = dt;
        }
        if let Some(lambda) = ov.lambda {
            self.attack.lambda = lambda;
        }
    }

    /// Structural validation of every section; the returned message is a
    /// usage error.
    pub fn validate(&self) -> Result<(), String> {
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        if self.histogram_bins < 2 {
            return Err("histogram_bins must be at least 2".into());
        }
        self.dataset.validate().map_err(|e| e.to_string())?;
        self.attack.validate().map_err(|e| e.to_string())?;
        self.purify.validate().map_err(|e| e.to_string())?;
        self.eval
            .validate(self.dataset.test)
            .map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Hash of the canonical serialization; identifies every artifact
    /// produced under this configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&canonical)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_missing_sections_with_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            out_dir = "runs/custom"
            [attack]
            lambda = 1000.0
            [eval]
            subset_size = 16
            "#,
        )
        .unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("runs/custom"));
        assert_eq!(cfg.attack.lambda, 1000.0);
        assert_eq!(cfg.eval.subset_size, 16);
        // Untouched sections keep their defaults.
        assert_eq!(cfg.attack.lr, AttackConfig::default().lr);
        assert_eq!(cfg.purify, PurifyConfig::default());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.attack.lambda *= 2.0;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn overrides_apply_before_hashing() {
        let mut cfg = RunConfig::default();
        let base_hash = cfg.hash();
        cfg.apply(&Overrides {
            t_star: Some(0.05),
            seed: Some(99),
            ..Overrides::default()
        });
        assert_eq!(cfg.purify.t_star, 0.05);
        assert_eq!(cfg.eval.t_star_list, vec![0.05]);
        assert_eq!(cfg.purify.seed, 99);
        assert_ne!(cfg.hash(), base_hash);
    }

    #[test]
    fn validation_rejects_out_of_range_stopping_time() {
        let mut cfg = RunConfig::default();
        cfg.purify.t_star = 0.0;
        let msg = cfg.validate().unwrap_err();
        assert!(msg.contains("(0, 1)"), "message should direct to (0, 1): {msg}");
    }
}
