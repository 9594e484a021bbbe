//! Iterative data collection: sample with the current policy, retrain, repeat.

use serde::{Deserialize, Serialize};

use super::{train_from, TrainConfig, TrainedModel};
use crate::baselines::{dpo_train_from, make_preference_pairs, rejection_sampling_train_from, sft_train_from};
use crate::envs::generate_offline_dataset;
use crate::error::{OreoError, Result};
use crate::inference::greedy_success_rate;
use crate::mdp::{OfflineDataset, PolicyTable, TaskMdp, ValueTable};
use crate::rng::{component_rng, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Oreo,
    /// Rejection sampling: SFT on successful trajectories only.
    Rft,
    Sft,
    Dpo,
}

impl std::str::FromStr for Algorithm {
    type Err = OreoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oreo" => Ok(Algorithm::Oreo),
            "rft" | "rs" => Ok(Algorithm::Rft),
            "sft" => Ok(Algorithm::Sft),
            "dpo" => Ok(Algorithm::Dpo),
            other => Err(OreoError::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Train `algo` on `dataset` starting from `(pi, value)`. Baselines leave the
/// value table at zero; DPO builds at most `pair_cap` pairs per task.
#[allow(clippy::too_many_arguments)]
pub fn fit<M: TaskMdp + ?Sized>(
    algo: Algorithm,
    dataset: &OfflineDataset,
    mdp: &M,
    reference: &PolicyTable,
    pi: PolicyTable,
    value: ValueTable,
    config: &TrainConfig,
    pair_cap: usize,
) -> Result<TrainedModel> {
    match algo {
        Algorithm::Oreo => train_from(dataset, mdp, reference, pi, value, config),
        Algorithm::Rft => rejection_sampling_train_from(dataset, mdp, reference, pi, config),
        Algorithm::Sft => sft_train_from(dataset, mdp, reference, pi, config),
        Algorithm::Dpo => {
            let mut rng = component_rng(config.seed, "pairs", 0);
            let pairs = make_preference_pairs(dataset, pair_cap, &mut rng);
            dpo_train_from(&pairs, mdp, reference, pi, config)
        }
    }
}

#[derive(Clone, Debug)]
pub struct IterationRound {
    pub round: usize,
    pub dataset: OfflineDataset,
    pub model: TrainedModel,
    pub greedy_success: f64,
}

/// Seed of the dataset sampled in `round`.
pub fn round_data_seed(seed: u64, round: usize) -> u64 {
    derive_seed(seed, "iterate-data", round as u64)
}

/// Round k samples `n_per_task` trajectories per task with the round k−1
/// policy (the reference for k = 0) and continues training from the round
/// k−1 tables. The reference itself stays fixed.
#[allow(clippy::too_many_arguments)]
pub fn run_iterations<M: TaskMdp + ?Sized>(
    mdp: &M,
    reference: &PolicyTable,
    config: &TrainConfig,
    algo: Algorithm,
    rounds: usize,
    n_per_task: usize,
    pair_cap: usize,
) -> Result<Vec<IterationRound>> {
    if rounds == 0 {
        return Err(OreoError::Config("rounds must be >= 1".into()));
    }
    let mut pi = reference.clone();
    let mut value = ValueTable::zeros(mdp, config.state_cap)?;
    let mut out = Vec::with_capacity(rounds);
    for round in 0..rounds {
        let dataset = generate_offline_dataset(mdp, &pi, n_per_task, round_data_seed(config.seed, round))?;
        let model = fit(algo, &dataset, mdp, reference, pi, value, config, pair_cap)?;
        let greedy_success = greedy_success_rate(&model.policy, mdp)?;
        pi = model.policy.clone();
        value = model.value.clone();
        out.push(IterationRound {
            round,
            dataset,
            model,
            greedy_success,
        });
    }
    Ok(out)
}
