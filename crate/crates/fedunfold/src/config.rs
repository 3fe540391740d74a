//! Experiment configuration: one JSON file drives partitioning, weight
//! training, evaluation runs, and analysis. All numerics live in the config;
//! the only CLI overrides are the master seed and the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::fedsim::{ClientProfile, FedConfig};
use crate::model::param_count;
use crate::unfolding::{GradMode, MetaConfig, MetaLossPoint};
use crate::weighting::{AdpState, FaState, Strategy};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// IDX image/label files; test files are optional.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
    /// Synthetic Gaussian blobs; a class-balanced test pool is drawn from an
    /// independent stream when `test_per_class` is positive.
    Synth {
        classes: usize,
        dims: usize,
        per_class: usize,
        spread: f64,
        seed: u64,
        #[serde(default)]
        test_per_class: usize,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    /// Full layer sizes, input and output included.
    pub layers: Vec<usize>,
}

/// Per-client knobs; the sample count comes from the partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileCfg {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_comm_prob")]
    pub comm_prob: f64,
    #[serde(default)]
    pub tau_schedule: Option<Vec<usize>>,
}

fn default_epochs() -> usize {
    1
}

fn default_comm_prob() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum StrategyCfg {
    #[default]
    StaticAvg,
    Dr {
        #[serde(default = "default_q")]
        q: f64,
    },
    FedAdp {
        #[serde(default = "default_beta")]
        beta: f64,
    },
    FedFa {
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Duw {
        #[serde(default)]
        schedule: Option<PathBuf>,
    },
}

fn default_q() -> f64 {
    1.0
}

fn default_beta() -> f64 {
    7.0
}

fn default_gamma() -> f64 {
    0.5
}

fn default_epsilon() -> f64 {
    1e-10
}


#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaCfg {
    pub iterations: usize,
    #[serde(default = "default_meta_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub grad_mode: GradMode,
    #[serde(default)]
    pub meta_loss_point: MetaLossPoint,
    #[serde(default)]
    pub include_final_global_loss: bool,
}

fn default_meta_lr() -> f64 {
    0.001
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_repeat() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub model: ModelCfg,
    pub partition: PartitionSpec,
    pub profiles: Vec<ProfileCfg>,
    pub fed: FedConfig,
    #[serde(default)]
    pub strategy: StrategyCfg,
    #[serde(default)]
    pub meta: Option<MetaCfg>,
    #[serde(default = "default_repeat")]
    pub repeat: usize,
    #[serde(default)]
    pub emit_json_trace: bool,
}

/// A loaded experiment: client datasets, bound profiles, optional test set.
pub struct Environment {
    pub clients: Vec<Dataset>,
    pub profiles: Vec<ClientProfile>,
    pub test: Option<Dataset>,
    pub layers: Vec<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.fed.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Seed and output-dir overrides; precedence belongs to the caller.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out_dir: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seed = s;
            self.fed.seed = s;
        }
        if let Some(dir) = out_dir {
            self.output_dir = dir;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fed.validate()?;
        if self.repeat == 0 {
            return Err(Error::Config("repeat must be at least 1".into()));
        }
        if self.model.layers.len() < 2 {
            return Err(Error::Config("model.layers needs input and output sizes".into()));
        }
        let k = self.partition.scheme.clients();
        if self.profiles.len() != k {
            return Err(Error::Config(format!(
                "{} profiles for a {k}-client partition",
                self.profiles.len()
            )));
        }
        if let Some(meta) = &self.meta {
            if meta.lr.is_nan() || meta.lr <= 0.0 {
                return Err(Error::Config("meta.lr must be positive".into()));
            }
        }
        Ok(())
    }

    /// Stable hash of the full configuration, recorded next to schedules.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::fsutil::fnv1a64(canonical.as_bytes()))
    }

    pub fn meta_config(&self) -> Result<MetaConfig> {
        let meta = self
            .meta
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a `meta` section".into()))?;
        Ok(MetaConfig {
            iterations: meta.iterations,
            lr: meta.lr,
            beta1: meta.beta1,
            beta2: meta.beta2,
            adam_eps: meta.adam_eps,
            grad_mode: meta.grad_mode,
            meta_loss_point: meta.meta_loss_point,
            include_final_global_loss: meta.include_final_global_loss,
            fed: self.fed.clone(),
            seed: self.seed,
        })
    }

    /// Instantiate the run strategy with fresh state. For the learned
    /// schedule the file must exist and match the run shape.
    pub fn strategy(&self, schedule_override: Option<&Path>) -> Result<Strategy> {
        Ok(match &self.strategy {
            StrategyCfg::StaticAvg => Strategy::StaticAvg,
            StrategyCfg::Dr { q } => Strategy::Dr { q: *q },
            StrategyCfg::FedAdp { beta } => Strategy::FedAdp {
                beta: *beta,
                state: AdpState::default(),
            },
            StrategyCfg::FedFa { gamma, epsilon } => Strategy::FedFa {
                gamma: *gamma,
                epsilon: *epsilon,
                state: FaState::default(),
            },
            StrategyCfg::Duw { schedule } => {
                let path = schedule_override
                    .map(Path::to_path_buf)
                    .or_else(|| schedule.clone())
                    .ok_or_else(|| {
                        Error::Config("duw strategy needs a schedule file".into())
                    })?;
                let text = fs::read_to_string(&path)?;
                let parsed = crate::unfolding::parse_schedule_csv(&text)?;
                let k = self.partition.scheme.clients();
                if parsed.rounds() != self.fed.rounds || parsed.clients() != k {
                    return Err(Error::Config(format!(
                        "schedule {} is {}x{}, run wants {}x{k}",
                        path.display(),
                        parsed.rounds(),
                        parsed.clients(),
                        self.fed.rounds
                    )));
                }
                Strategy::Duw { schedule: parsed }
            }
        })
    }
}

/// Load or generate the pool, partition it, and bind profiles to shares.
pub fn build_environment(cfg: &ExperimentConfig) -> Result<Environment> {
    let (pool, test) = match &cfg.dataset {
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let pool = data::load_idx(train_images, train_labels)?;
            let test = match (test_images, test_labels) {
                (Some(ti), Some(tl)) => Some(data::load_idx(ti, tl)?),
                (None, None) => None,
                _ => {
                    return Err(Error::Config(
                        "test_images and test_labels must be given together".into(),
                    ))
                }
            };
            (pool, test)
        }
        DatasetSource::Synth {
            classes,
            dims,
            per_class,
            spread,
            seed,
            test_per_class,
        } => {
            let pool = data::synth_blobs(*classes, *dims, *per_class, *spread, *seed)?;
            let test = if *test_per_class > 0 {
                Some(data::synth_blobs_heldout(
                    *classes,
                    *dims,
                    *test_per_class,
                    *spread,
                    *seed,
                )?)
            } else {
                None
            };
            (pool, test)
        }
    };

    let layers = cfg.model.layers.clone();
    if layers[0] != pool.features() {
        return Err(Error::Config(format!(
            "model input width {} vs {} dataset features",
            layers[0],
            pool.features()
        )));
    }
    if *layers.last().unwrap() != pool.classes {
        return Err(Error::Config(format!(
            "model output width {} vs {} classes",
            layers.last().unwrap(),
            pool.classes
        )));
    }
    // Guard against accidentally enormous models in config files.
    let _ = param_count(&layers);

    let clients = data::partition(&pool, &cfg.partition)?;
    let profiles: Vec<ClientProfile> = clients
        .iter()
        .zip(&cfg.profiles)
        .map(|(share, p)| ClientProfile {
            samples: share.len(),
            epochs: p.epochs,
            comm_prob: p.comm_prob,
            tau_schedule: p.tau_schedule.clone(),
        })
        .collect();
    for p in &profiles {
        p.validate()?;
    }

    Ok(Environment {
        clients,
        profiles,
        test,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PartitionScheme;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "seed": 7,
            "output_dir": "out/test",
            "dataset": {
                "source": "synth",
                "classes": 2, "dims": 3, "per_class": 20,
                "spread": 0.1, "seed": 5, "test_per_class": 10
            },
            "model": { "layers": [3, 4, 2] },
            "partition": { "kind": "iid_balanced", "clients": 2, "seed": 9 },
            "profiles": [ {"epochs": 1}, {"epochs": 2, "comm_prob": 0.5} ],
            "fed": { "rounds": 3, "lr": 0.05, "batch_size": 8 }
        })
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.repeat, 1);
        assert!(matches!(cfg.strategy, StrategyCfg::StaticAvg));
        assert!(matches!(
            cfg.partition.scheme,
            PartitionScheme::IidBalanced { clients: 2 }
        ));
    }

    #[test]
    fn strategy_defaults_follow_the_reference_settings() {
        let dr: StrategyCfg = serde_json::from_value(serde_json::json!({"kind": "dr"})).unwrap();
        assert!(matches!(dr, StrategyCfg::Dr { q } if q == 1.0));
        let adp: StrategyCfg =
            serde_json::from_value(serde_json::json!({"kind": "fed_adp"})).unwrap();
        assert!(matches!(adp, StrategyCfg::FedAdp { beta } if beta == 7.0));
        let fa: StrategyCfg =
            serde_json::from_value(serde_json::json!({"kind": "fed_fa"})).unwrap();
        assert!(
            matches!(fa, StrategyCfg::FedFa { gamma, epsilon } if gamma == 0.5 && epsilon == 1e-10)
        );
    }

    #[test]
    fn profile_count_mismatch_is_a_config_error() {
        let mut json = minimal_json();
        json["profiles"] = serde_json::json!([{"epochs": 1}]);
        let cfg: ExperimentConfig = serde_json::from_value(json).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn environment_binds_partition_sizes() {
        let cfg: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        let env = build_environment(&cfg).unwrap();
        assert_eq!(env.clients.len(), 2);
        assert_eq!(env.profiles[0].samples, env.clients[0].len());
        assert_eq!(env.test.as_ref().unwrap().len(), 20);
        // Test pool differs from the training pool.
        assert_ne!(
            env.test.as_ref().unwrap().inputs.data()[..6],
            env.clients[0].inputs.data()[..6]
        );
    }

    #[test]
    fn model_width_mismatch_is_rejected() {
        let mut json = minimal_json();
        json["model"] = serde_json::json!({ "layers": [5, 4, 2] });
        let cfg: ExperimentConfig = serde_json::from_value(json).unwrap();
        assert!(build_environment(&cfg).is_err());
    }

    #[test]
    fn content_hash_is_stable_and_sensitive() {
        let a: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        let b: ExperimentConfig = serde_json::from_value(minimal_json()).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let mut json = minimal_json();
        json["seed"] = serde_json::json!(8);
        let c: ExperimentConfig = serde_json::from_value(json).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }
}
