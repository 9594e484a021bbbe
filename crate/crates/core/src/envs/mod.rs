//! Synthetic task families and offline dataset generation.

mod digit_chain;
mod gridworld;
mod keyhole;
mod tree;

pub use digit_chain::{DigitChain, DigitChainSpec};
pub use gridworld::{Cell, Gridworld, GridworldSpec, DOWN, LEFT, RIGHT, UP};
pub use keyhole::{Keyhole, KeyholeSpec};
pub use tree::TreeMdp;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::mdp::{enumerate_trajectories, rollout, OfflineDataset, PolicyTable, State, TaskMdp, TokenId};
use crate::rng::{component_rng, sample_index};

/// Declarative environment description, as read from a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum EnvSpec {
    DigitChain(DigitChainSpec),
    Keyhole(KeyholeSpec),
    Gridworld(GridworldSpec),
}

impl EnvSpec {
    pub fn build(&self) -> Result<Env> {
        Ok(match self {
            EnvSpec::DigitChain(s) => Env::DigitChain(DigitChain::new(s.clone())?),
            EnvSpec::Keyhole(s) => Env::Keyhole(Keyhole::new(s.clone())?),
            EnvSpec::Gridworld(s) => Env::Gridworld(Gridworld::new(s.clone())?),
        })
    }
}

/// Any shipped environment.
#[derive(Clone, Debug)]
pub enum Env {
    DigitChain(DigitChain),
    Keyhole(Keyhole),
    Gridworld(Gridworld),
}

impl Env {
    fn inner(&self) -> &dyn TaskMdp {
        match self {
            Env::DigitChain(m) => m,
            Env::Keyhole(m) => m,
            Env::Gridworld(m) => m,
        }
    }
}

impl TaskMdp for Env {
    fn env_id(&self) -> &str {
        self.inner().env_id()
    }
    fn vocab_size(&self) -> usize {
        self.inner().vocab_size()
    }
    fn initial_states(&self) -> Vec<State> {
        self.inner().initial_states()
    }
    fn legal_actions(&self, s: &State) -> Vec<TokenId> {
        self.inner().legal_actions(s)
    }
    fn transition(&self, s: &State, a: TokenId) -> Result<State> {
        self.inner().transition(s, a)
    }
    fn reward(&self, s: &State, a: TokenId) -> Result<f64> {
        self.inner().reward(s, a)
    }
    fn horizon(&self) -> usize {
        self.inner().horizon()
    }
    fn emits_observations(&self) -> bool {
        self.inner().emits_observations()
    }
}

/// Per-query sample count used for offline data collection.
pub const DEFAULT_SAMPLES_PER_TASK: usize = 10;

/// Sample one trajectory from `policy` starting at `s0`.
pub fn sample_trajectory<M, R>(mdp: &M, policy: &PolicyTable, s0: &State, rng: &mut R) -> Result<crate::mdp::Trajectory>
where
    M: TaskMdp + ?Sized,
    R: rand::Rng + ?Sized,
{
    rollout(mdp, s0, |s, actions| {
        let entry = policy.entry(s)?;
        if entry.actions != actions {
            return Err(OreoError::Contract(format!(
                "policy action set differs from legal actions at {s:?}"
            )));
        }
        Ok(sample_index(&entry.probs(), rng))
    })
}

/// `n_per_task` behavior rollouts per task instance. Instance `i` draws from
/// its own stream derived from `seed`, so output is independent of order.
pub fn generate_offline_dataset<M: TaskMdp + ?Sized>(
    mdp: &M,
    behavior: &PolicyTable,
    n_per_task: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    if n_per_task == 0 {
        return Err(OreoError::Config("n_per_task must be positive".into()));
    }
    let mut trajectories = Vec::new();
    for (i, s0) in mdp.initial_states().iter().enumerate() {
        let mut rng = component_rng(seed, "rollout", i as u64);
        for _ in 0..n_per_task {
            trajectories.push(sample_trajectory(mdp, behavior, s0, &mut rng)?);
        }
    }
    Ok(OfflineDataset::new(mdp.env_id(), trajectories))
}

/// Every complete trajectory of every task instance, once each.
pub fn full_coverage_dataset<M: TaskMdp + ?Sized>(mdp: &M, cap: usize) -> Result<OfflineDataset> {
    let mut trajectories = Vec::new();
    for s0 in mdp.initial_states() {
        trajectories.extend(enumerate_trajectories(
            mdp,
            &s0,
            cap.saturating_sub(trajectories.len()),
        )?);
    }
    Ok(OfflineDataset::new(mdp.env_id(), trajectories))
}

/// Optional positive/negative balancing filter: per task keep at most
/// `max_each` of each class, never more positives than negatives, but at
/// least one positive when the task has any.
pub fn balance_dataset(ds: &OfflineDataset, max_each: usize, seed: u64) -> OfflineDataset {
    let mut keep = Vec::new();
    for (g, (_, idxs)) in ds.groups().into_iter().enumerate() {
        let mut rng = component_rng(seed, "balance", g as u64);
        let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
            idxs.into_iter().partition(|&i| ds.trajectories[i].total_reward() > 0.0);
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        neg.truncate(max_each);
        let n_pos = pos.len().min(max_each).min(neg.len()).max(pos.len().min(1));
        pos.truncate(n_pos);
        let mut chosen: Vec<usize> = pos.into_iter().chain(neg).collect();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    OfflineDataset::new(
        ds.env_id.clone(),
        keep.into_iter().map(|i| ds.trajectories[i].clone()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::DEFAULT_ENUM_CAP;

    #[test]
    fn spec_parses_from_json() {
        let spec: EnvSpec = serde_json::from_str(r#"{"family":"keyhole","vocab":2,"depth":3}"#).unwrap();
        assert!(matches!(spec, EnvSpec::Keyhole(_)));
        assert!(spec.build().is_ok());
    }

    #[test]
    fn generated_dataset_is_valid_and_seeded() {
        let mdp = DigitChain::new(DigitChainSpec {
            instances: 4,
            ..Default::default()
        })
        .unwrap();
        let reference = PolicyTable::uniform(&mdp, DEFAULT_ENUM_CAP).unwrap();
        let a = generate_offline_dataset(&mdp, &reference, DEFAULT_SAMPLES_PER_TASK, 11).unwrap();
        assert_eq!(a.len(), 40);
        a.validate(&mdp).unwrap();
        let b = generate_offline_dataset(&mdp, &reference, DEFAULT_SAMPLES_PER_TASK, 11).unwrap();
        assert_eq!(a.to_jsonl_string(), b.to_jsonl_string());
        let c = generate_offline_dataset(&mdp, &reference, DEFAULT_SAMPLES_PER_TASK, 12).unwrap();
        assert_ne!(a.to_jsonl_string(), c.to_jsonl_string());
        assert_eq!(a.groups().len(), 4);
    }

    #[test]
    fn balancing_rules() {
        let mdp = Keyhole::new(KeyholeSpec::default()).unwrap();
        let full = full_coverage_dataset(&mdp, DEFAULT_ENUM_CAP).unwrap();
        let mut many_pos = full.clone();
        let pos: Vec<_> = full
            .trajectories
            .iter()
            .filter(|t| t.total_reward() > 0.0)
            .cloned()
            .collect();
        many_pos.trajectories.extend(pos);
        // 8 positives, 4 negatives
        let b = balance_dataset(&many_pos, 6, 0);
        assert_eq!(b.len() - b.positives(), 4);
        assert_eq!(b.positives(), 4);

        let only_neg = full.filter(|t| t.total_reward() == 0.0);
        let mut one_pos = only_neg.clone();
        one_pos.trajectories.push(full.trajectories[7].clone());
        let b = balance_dataset(&one_pos, 0, 0);
        assert_eq!(b.positives(), 1);
    }
}
