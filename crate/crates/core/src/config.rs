//! JSON run configuration: the single document every CLI command starts
//! from. Unknown keys are rejected; defaults follow the hyperparameter
//! ranges the training recipes were tuned in.

use crate::cp::AlsConfig;
use crate::data::{SyntheticSpec, TaskKind};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, ResolutionLadder};
use crate::interp::Scheme;
use crate::model::{Activation, LossKind};
use crate::optim::OptimConfig;
use crate::reg::RegConfig;
use crate::train::{FinegrainCriterion, InitKind, TrainSettings};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSection {
    /// Per-level grid dims, coarse to fine, e.g. [[4,5],[8,10]].
    pub levels: Vec<Vec<usize>>,
    /// 1-based count of levels trained full rank.
    pub r0: usize,
    /// Physical extent per axis; defaults to the unit box.
    #[serde(default)]
    pub extent: Option<Vec<(f64, f64)>>,
}

impl LadderSection {
    pub fn build(&self) -> Result<ResolutionLadder> {
        let levels = self
            .levels
            .iter()
            .map(|dims| match &self.extent {
                Some(e) => GridSpec::new(dims.clone(), e.clone()),
                None => GridSpec::unit(dims.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        ResolutionLadder::new(levels, self.r0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub outputs: usize,
    pub features: usize,
    /// CP rank of the low-rank stage.
    pub rank: usize,
    /// Defaults by task: sigmoid for classification, identity otherwise.
    pub activation: Option<Activation>,
    /// Reproduce the loss variant that scales both CE terms.
    pub beta_on_both: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { outputs: 4, features: 2, rank: 5, activation: None, beta_on_both: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegSection {
    pub lambda_r: f64,
    /// Low-rank stage override.
    pub lambda_r_low_rank: Option<f64>,
    pub l2_weight: f64,
    pub spatial_weight: f64,
    pub sigma: f64,
    pub sparsify_below: f64,
}

impl Default for RegSection {
    fn default() -> Self {
        let reg = RegConfig::default();
        RegSection {
            lambda_r: reg.lambda_r,
            lambda_r_low_rank: None,
            l2_weight: reg.l2_weight,
            spatial_weight: reg.spatial_weight,
            sigma: reg.sigma,
            sparsify_below: reg.sparsify_below,
        }
    }
}

impl RegSection {
    fn to_reg_config(&self) -> RegConfig {
        RegConfig {
            lambda_r: self.lambda_r,
            l2_weight: self.l2_weight,
            spatial_weight: self.spatial_weight,
            sigma: self.sigma,
            sparsify_below: self.sparsify_below,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpSection {
    pub max_iters: usize,
    pub fit_tol: f64,
    /// A handoff fit below this is recorded as a warning.
    pub fit_floor: f64,
}

impl Default for CpSection {
    fn default() -> Self {
        let d = AlsConfig::default();
        CpSection { max_iters: d.max_iters, fit_tol: d.fit_tol, fit_floor: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        true_rank: usize,
        smoothness: f64,
        noise_sigma: f64,
        samples: usize,
    },
    Csv {
        path: PathBuf,
    },
    /// Bulk tensors, one MRTN file per ladder level, plus a labels CSV
    /// (the layout `generate` writes).
    Mrtn {
        inputs: Vec<PathBuf>,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskKind,
    pub ladder: LadderSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub regularization: RegSection,
    #[serde(default)]
    pub criterion: FinegrainCriterion,
    /// Defaults by task: nearest for classification, multilinear otherwise.
    #[serde(default)]
    pub interpolation: Option<Scheme>,
    #[serde(default)]
    pub cp: CpSection,
    pub data: DataSource,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.ladder.build()?;
        self.optimizer.validate()?;
        self.regularization.to_reg_config().validate()?;
        self.criterion.validate()?;
        if self.model.outputs == 0 || self.model.features == 0 || self.model.rank == 0 {
            return Err(Error::Config("outputs, features and rank must be >= 1".into()));
        }
        match &self.data {
            DataSource::Synthetic { true_rank, smoothness, samples, noise_sigma } => {
                if *true_rank == 0 || *smoothness <= 0.0 || *samples < 5 || *noise_sigma < 0.0 {
                    return Err(Error::Config("invalid synthetic data spec".into()));
                }
            }
            DataSource::Csv { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::Config("empty CSV path".into()));
                }
            }
            DataSource::Mrtn { inputs, .. } => {
                if inputs.len() != self.ladder.levels.len() {
                    return Err(Error::Config(format!(
                        "{} input tensors for a {}-level ladder",
                        inputs.len(),
                        self.ladder.levels.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn activation(&self) -> Activation {
        self.model.activation.unwrap_or(match self.task {
            TaskKind::Classification => Activation::Sigmoid,
            TaskKind::Regression => Activation::Identity,
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.interpolation.unwrap_or(match self.task {
            TaskKind::Classification => Scheme::Nearest,
            TaskKind::Regression => Scheme::Multilinear,
        })
    }

    /// Loss for this task; classification needs the class-balance ratio.
    pub fn loss(&self, beta: f64) -> LossKind {
        match self.task {
            TaskKind::Classification => {
                LossKind::WeightedCe { beta, beta_on_both: self.model.beta_on_both }
            }
            TaskKind::Regression => LossKind::Mse,
        }
    }

    pub fn synthetic_spec(&self) -> Result<Option<SyntheticSpec>> {
        match &self.data {
            DataSource::Synthetic { true_rank, smoothness, noise_sigma, samples } => {
                Ok(Some(SyntheticSpec {
                    task: self.task,
                    outputs: self.model.outputs,
                    features: self.model.features,
                    ladder: self.ladder.build()?,
                    true_rank: *true_rank,
                    smoothness: *smoothness,
                    noise_sigma: *noise_sigma,
                    samples: *samples,
                    seed: self.seed,
                }))
            }
            DataSource::Csv { .. } | DataSource::Mrtn { .. } => Ok(None),
        }
    }

    pub fn train_settings(&self, beta: f64) -> TrainSettings {
        let mut optim = self.optimizer.clone();
        optim.seed = self.seed;
        TrainSettings {
            activation: self.activation(),
            loss: self.loss(beta),
            rank: self.model.rank,
            optim,
            reg: self.regularization.to_reg_config(),
            lambda_r_low_rank: self.regularization.lambda_r_low_rank,
            criterion: self.criterion.clone(),
            scheme: self.scheme(),
            cp_max_iters: self.cp.max_iters,
            cp_fit_tol: self.cp.fit_tol,
            cp_fit_floor: self.cp.fit_floor,
            init: InitKind::FullRankCp,
            epoch_schedule: None,
        }
    }

    /// Stable hash of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        hex_string(&digest)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "task": "classification",
            "ladder": {"levels": [[2,2],[4,4]], "r0": 1},
            "data": {"synthetic": {"true_rank": 2, "smoothness": 0.3, "noise_sigma": 0.0, "samples": 100}},
            "seed": 7
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_str(&minimal_json()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.activation(), Activation::Sigmoid);
        assert_eq!(cfg.scheme(), Scheme::Nearest);
        assert_eq!(cfg.model.rank, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = minimal_json().replace("\"seed\": 7", "\"seed\": 7, \"bogus\": 1");
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
    }

    #[test]
    fn hash_stable_and_sensitive() {
        let a: RunConfig = serde_json::from_str(&minimal_json()).unwrap();
        let b: RunConfig = serde_json::from_str(&minimal_json()).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 8;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn bad_ladder_rejected() {
        let bad = minimal_json().replace("[[2,2],[4,4]]", "[[2,2],[3,4]]");
        let cfg: RunConfig = serde_json::from_str(&bad).unwrap();
        assert!(cfg.validate().is_err());
    }
}
