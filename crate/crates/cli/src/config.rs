//! Run configuration: a TOML file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::Context;
use oreo_core::envs::{DigitChainSpec, EnvSpec, GridworldSpec, KeyholeSpec};
use oreo_core::inference::EvalMode;
use oreo_core::trainer::{Algorithm, TrainConfig};
use oreo_core::OreoError;
use serde::Deserialize;

/// Output root used when neither `--out`, the environment, nor the config
/// file names one.
pub const DEFAULT_OUT: &str = "runs/default";
pub const OUT_ENV_VARS: [&str; 2] = ["ORE0_OUT", "OREO_OUT"];

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset file; defaults to `<out>/data/dataset.jsonl`.
    pub path: Option<PathBuf>,
    /// Preference pairs file for DPO; built from the dataset when absent.
    pub pairs: Option<PathBuf>,
    /// `ref` or a checkpoint path.
    pub behavior: String,
    /// Reference checkpoint; uniform over legal actions when absent.
    pub reference: Option<PathBuf>,
    pub n_per_task: usize,
    pub pair_cap: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            pairs: None,
            behavior: "ref".into(),
            reference: None,
            n_per_task: oreo_core::envs::DEFAULT_SAMPLES_PER_TASK,
            pair_cap: oreo_core::baselines::DEFAULT_PAIR_CAP,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: String,
    pub episodes: usize,
    /// Checkpoint to evaluate; defaults to `<out>/ckpt/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: "greedy".into(),
            episodes: 100,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: Option<EnvSpec>,
    pub algo: Option<Algorithm>,
    pub out: Option<PathBuf>,
    pub rounds: Option<usize>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| OreoError::Parse(format!("{}: {e}", path.display())).into())
    }

    pub fn env(&self) -> Result<&EnvSpec, OreoError> {
        self.env
            .as_ref()
            .ok_or_else(|| OreoError::Config("no environment given: use --env or an [env] table".into()))
    }

    pub fn algo(&self) -> Algorithm {
        self.algo.unwrap_or(Algorithm::Oreo)
    }

    pub fn eval_mode(&self) -> Result<EvalMode, OreoError> {
        self.eval.mode.parse()
    }

    /// `--out`, then the environment, then the config file.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        for var in OUT_ENV_VARS {
            if let Some(v) = std::env::var_os(var).filter(|v| !v.is_empty()) {
                return PathBuf::from(v);
            }
        }
        self.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

/// Default spec for an environment family name.
pub fn env_family(name: &str) -> Result<EnvSpec, OreoError> {
    match name {
        "digit-chain" => Ok(EnvSpec::DigitChain(DigitChainSpec::default())),
        "keyhole" => Ok(EnvSpec::Keyhole(KeyholeSpec::default())),
        "gridworld" => Ok(EnvSpec::Gridworld(GridworldSpec::default())),
        other => Err(OreoError::Config(format!(
            "unknown environment `{other}` (expected digit-chain, keyhole or gridworld)"
        ))),
    }
}

pub fn same_family(a: &EnvSpec, b: &EnvSpec) -> bool {
    std::mem::discriminant(a) == std::mem::discriminant(b)
}
