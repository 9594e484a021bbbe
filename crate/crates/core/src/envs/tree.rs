use std::collections::HashMap;

use rand::Rng;

use crate::error::{OreoError, Result};
use crate::mdp::{check_action, State, TaskMdp, TokenId};

/// Full `vocab`-ary tree of fixed depth with an arbitrary reward per leaf.
/// Used for randomized property checks; not a shipped task family.
#[derive(Clone, Debug)]
pub struct TreeMdp {
    vocab: usize,
    depth: usize,
    leaf_rewards: HashMap<Vec<TokenId>, f64>,
}

impl TreeMdp {
    /// `reward_of(actions)` labels each leaf by its action sequence.
    pub fn new(vocab: usize, depth: usize, mut reward_of: impl FnMut(&[TokenId]) -> f64) -> Result<Self> {
        if vocab < 2 || depth == 0 {
            return Err(OreoError::Config("tree needs vocab >= 2 and depth >= 1".into()));
        }
        let leaves = (vocab as u64).checked_pow(depth as u32).unwrap_or(u64::MAX);
        if leaves > 1 << 22 {
            return Err(OreoError::Resource(format!("{leaves} leaves")));
        }
        let mut leaf_rewards = HashMap::new();
        let mut path = vec![0 as TokenId; depth];
        for code in 0..leaves {
            let mut rest = code;
            for p in path.iter_mut().rev() {
                *p = (rest % vocab as u64) as TokenId;
                rest /= vocab as u64;
            }
            leaf_rewards.insert(path.clone(), reward_of(&path));
        }
        Ok(Self {
            vocab,
            depth,
            leaf_rewards,
        })
    }

    /// Uniform random leaf rewards in [0, 1).
    pub fn random<R: Rng>(vocab: usize, depth: usize, rng: &mut R) -> Result<Self> {
        Self::new(vocab, depth, |_| rng.gen::<f64>())
    }

    /// Depth-1 tree whose leaf rewards are given per action.
    pub fn bandit(rewards: &[f64]) -> Result<Self> {
        Self::new(rewards.len(), 1, |p| rewards[p[0] as usize])
    }

    /// Add `c` to every leaf reward.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            vocab: self.vocab,
            depth: self.depth,
            leaf_rewards: self.leaf_rewards.iter().map(|(k, v)| (k.clone(), v + c)).collect(),
        }
    }
}

impl TaskMdp for TreeMdp {
    fn env_id(&self) -> &str {
        "tree"
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn initial_states(&self) -> Vec<State> {
        vec![State::prompt(vec![0])]
    }

    fn legal_actions(&self, s: &State) -> Vec<TokenId> {
        if s.is_terminal() {
            return Vec::new();
        }
        (0..self.vocab as TokenId).collect()
    }

    fn transition(&self, s: &State, a: TokenId) -> Result<State> {
        check_action(self, s, a)?;
        Ok(s.extend(a, &[], true, s.len() == self.depth))
    }

    fn reward(&self, s: &State, a: TokenId) -> Result<f64> {
        check_action(self, s, a)?;
        if s.len() != self.depth {
            return Ok(0.0);
        }
        let mut path = s.tokens()[1..].to_vec();
        path.push(a);
        Ok(self.leaf_rewards[&path])
    }

    fn horizon(&self) -> usize {
        self.depth
    }
}
