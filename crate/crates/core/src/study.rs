//! Bundled study configurations (M1–M4), desk-scale overrides and run
//! manifests.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::elicitation::ElicitationPlan;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::models::GenerativeModel;
use crate::oracle::{PriorBlock, TruePrior};
use crate::trainer::TrainConfig;

/// Gumbel-softmax temperature used by the binomial presets.
pub const BINOMIAL_TEMPERATURE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StudyId {
    M1,
    M2,
    M3,
    M4,
}

impl StudyId {
    pub const ALL: [StudyId; 4] = [StudyId::M1, StudyId::M2, StudyId::M3, StudyId::M4];
}

impl fmt::Display for StudyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for StudyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(StudyId::M1),
            "M2" => Ok(StudyId::M2),
            "M3" => Ok(StudyId::M3),
            "M4" => Ok(StudyId::M4),
            _ => Err(Error::config(format!("unknown study '{s}' (expected M1..M4)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub study: StudyId,
    pub prior: TruePrior,
    pub model: GenerativeModel,
    pub plan: ElicitationPlan,
    pub flow: FlowConfig,
    pub train: TrainConfig,
    /// Oracle draws behind the expert statistics.
    pub expert_samples: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Human-readable list of deviations from the preset.
    #[serde(default)]
    pub overrides: Vec<String>,
}

fn normal_betas() -> Vec<PriorBlock> {
    vec![
        PriorBlock::normal("beta0", 10.0, 2.5),
        PriorBlock::normal("beta1", 7.0, 1.3),
        PriorBlock::normal("beta2", 2.5, 0.8),
    ]
}

impl StudyConfig {
    pub fn preset(study: StudyId) -> Self {
        let (prior, model, epochs, lr) = match study {
            StudyId::M1 => (
                vec![
                    PriorBlock::normal("beta0", 0.1, 0.1),
                    PriorBlock::normal("beta1", -0.1, 0.3),
                ],
                GenerativeModel::binomial(),
                600,
                1e-4,
            ),
            StudyId::M2 => {
                let mut p = normal_betas();
                p.push(PriorBlock::gamma("sigma", 5.0, 2.0));
                (p, GenerativeModel::normal(), 1500, 2.5e-4)
            }
            StudyId::M3 => (
                vec![
                    PriorBlock::normal("beta0", 10.0, 2.5),
                    PriorBlock::skew_normal("beta1", 7.0, 1.3, 4.0),
                    PriorBlock::skew_normal("beta2", 2.5, 0.8, 4.0),
                    PriorBlock::gamma("sigma", 5.0, 2.0),
                ],
                GenerativeModel::normal(),
                1500,
                2.5e-4,
            ),
            StudyId::M4 => (
                vec![
                    PriorBlock::MvNormal {
                        names: vec!["beta0".into(), "beta1".into(), "beta2".into()],
                        mean: vec![10.0, 7.0, 2.5],
                        scales: vec![2.5, 1.3, 0.8],
                        correlation: vec![
                            vec![1.0, 0.3, -0.3],
                            vec![0.3, 1.0, -0.2],
                            vec![-0.3, -0.2, 1.0],
                        ],
                    },
                    PriorBlock::gamma("sigma", 5.0, 2.0),
                ],
                GenerativeModel::normal(),
                1500,
                1e-4,
            ),
        };
        let flow = FlowConfig {
            positivity_dims: model.positivity_dims(),
            ..FlowConfig::new(model.dim())
        };
        let temperature = match model {
            GenerativeModel::BinomialRegression { .. } => BINOMIAL_TEMPERATURE,
            GenerativeModel::NormalRegression { .. } => 1.0,
        };
        StudyConfig {
            study,
            prior: TruePrior { blocks: prior },
            plan: ElicitationPlan::quantiles_and_correlation(&model.target_names()),
            model,
            flow,
            train: TrainConfig {
                epochs,
                learning_rate: lr,
                gumbel_temperature: temperature,
                ..TrainConfig::default()
            },
            expert_samples: 10_000,
            seeds: (1..=30).collect(),
            output_dir: PathBuf::from("runs"),
            overrides: Vec::new(),
        }
    }

    /// Desk-scale variant: 2 blocks of 64 units, B=32, S=100, δ=5e-4,
    /// 400 (binomial) or 800 (normal) epochs, 5 seeds.
    pub fn reduced(mut self) -> Self {
        self.flow.num_blocks = 2;
        self.flow.hidden_units = 64;
        self.train.batch_size = 32;
        self.train.samples_per_prior = 100;
        self.train.learning_rate = 5e-4;
        self.train.epochs = match self.model {
            GenerativeModel::BinomialRegression { .. } => 400,
            GenerativeModel::NormalRegression { .. } => 800,
        };
        self.seeds = (1..=5).collect();
        self.overrides.push("reduced".into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        self.model.validate()?;
        self.plan.validate()?;
        self.flow.validate()?;
        self.train.validate()?;
        if self.prior.dim() != self.model.dim() || self.flow.dim_theta != self.model.dim() {
            return Err(Error::config(format!(
                "dimension mismatch: prior {}, flow {}, model {}",
                self.prior.dim(),
                self.flow.dim_theta,
                self.model.dim()
            )));
        }
        if self.flow.positivity_dims != self.model.positivity_dims() {
            return Err(Error::config("flow positivity dims must match the model"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("toml encode: {e}")))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: StudyConfig = toml::from_str(s).map_err(|e| Error::config(format!("toml decode: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reproducibility record written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub study: StudyId,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub overrides: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &StudyConfig, seeds: Vec<u64>) -> Self {
        Manifest {
            command: command.into(),
            study: cfg.study,
            config_hash: cfg.hash(),
            seeds,
            code_version: env!("CARGO_PKG_VERSION").into(),
            overrides: cfg.overrides.clone(),
            warnings: Vec::new(),
        }
    }
}

/// Seeds from `"7"`, `"1,4,9"` or an inclusive range `"1..30"`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = |part: &str| Error::config(format!("cannot parse seed list '{part}'"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad(part))?;
            let b: u64 = b.trim_start_matches('=').trim().parse().map_err(|_| bad(part))?;
            if b < a {
                return Err(bad(part));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad(part))?);
        }
    }
    if out.is_empty() {
        return Err(Error::config("empty seed list"));
    }
    Ok(out)
}
