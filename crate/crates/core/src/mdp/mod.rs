//! Token-level MDP abstraction.
//!
//! A state is the full token sequence generated so far (prompt, emitted tokens
//! and any environment observations). Transitions are deterministic and
//! append tokens; rewards are sparse and attached to the transition that
//! enters a terminal state. Discounting is fixed at 1.

mod dataset;
mod tables;

pub use dataset::{OfflineDataset, StepRecord, TrajectoryRecord};
pub(crate) use tables::kl_from_logits;
pub use tables::{
    kl_to_reference, log_ratio, log_softmax, logsumexp, softmax, step_log_prob, total_variation, PolicyEntry,
    PolicyTable, ValueTable,
};

use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::error::{OreoError, Result};

pub type TokenId = u32;

/// Default cap on the number of states or trajectories any enumeration may visit.
pub const DEFAULT_ENUM_CAP: usize = 1 << 20;

/// An immutable token sequence with step-boundary markers.
///
/// Identity (equality and hashing) is the token sequence alone: within one
/// deterministic MDP the boundaries and terminal flag are functions of it.
#[derive(Clone)]
pub struct State {
    tokens: Vec<TokenId>,
    boundaries: Vec<usize>,
    terminal: bool,
}

impl State {
    pub fn new(tokens: Vec<TokenId>, boundaries: Vec<usize>, terminal: bool) -> Result<Self> {
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OreoError::Contract(format!(
                "boundary indices must be strictly increasing: {boundaries:?}"
            )));
        }
        if boundaries.last().is_some_and(|&b| b > tokens.len()) {
            return Err(OreoError::Contract(format!(
                "boundary index beyond sequence length {}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            boundaries,
            terminal,
        })
    }

    /// A prompt state whose end is the first step boundary.
    pub fn prompt(tokens: Vec<TokenId>) -> Self {
        let len = tokens.len();
        Self {
            tokens,
            boundaries: vec![len],
            terminal: false,
        }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// True when the sequence ends exactly on a step boundary.
    pub fn at_boundary(&self) -> bool {
        self.boundaries.last() == Some(&self.tokens.len())
    }

    /// Successor builder for MDP implementations: appends `action` followed by
    /// `observation`, optionally closing a step at the new end.
    pub fn extend(&self, action: TokenId, observation: &[TokenId], close_step: bool, terminal: bool) -> State {
        let mut tokens = Vec::with_capacity(self.tokens.len() + 1 + observation.len());
        tokens.extend_from_slice(&self.tokens);
        tokens.push(action);
        tokens.extend_from_slice(observation);
        let mut boundaries = self.boundaries.clone();
        if close_step {
            boundaries.push(tokens.len());
        }
        State {
            tokens,
            boundaries,
            terminal,
        }
    }

    /// Key of the pre-observation afterstate `s ∥ a`.
    pub fn afterstate_key(&self, action: TokenId) -> Vec<TokenId> {
        let mut key = self.tokens.clone();
        key.push(action);
        key
    }
}

impl PartialEq for State {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for State {}

impl Hash for State {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.tokens.hash(state);
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "State[{}]", fmt_tokens(&self.tokens))?;
        if self.terminal {
            write!(f, "#")?;
        }
        Ok(())
    }
}

pub fn fmt_tokens(tokens: &[TokenId]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

/// A deterministic, finite-horizon token MDP.
pub trait TaskMdp: Send + Sync {
    fn env_id(&self) -> &str;

    fn vocab_size(&self) -> usize;

    /// One initial state per task instance, in a fixed order.
    fn initial_states(&self) -> Vec<State>;

    /// Legal actions in ascending token order; empty for terminal states.
    fn legal_actions(&self, s: &State) -> Vec<TokenId>;

    /// Pure successor function. Implementations must reject terminal
    /// sources with [`OreoError::Contract`] and illegal actions with
    /// [`OreoError::Domain`]; [`check_action`] does both.
    fn transition(&self, s: &State, a: TokenId) -> Result<State>;

    fn reward(&self, s: &State, a: TokenId) -> Result<f64>;

    /// Maximum number of actions in any rollout.
    fn horizon(&self) -> usize;

    /// Whether transitions append environment observation tokens. Search
    /// procedures that need to simulate dynamics are not applicable then.
    fn emits_observations(&self) -> bool {
        false
    }
}

/// Shared precondition check for [`TaskMdp::transition`] implementations.
pub fn check_action<M: TaskMdp + ?Sized>(mdp: &M, s: &State, a: TokenId) -> Result<()> {
    if s.is_terminal() {
        return Err(OreoError::Contract(format!("transition from terminal state {s:?}")));
    }
    if !mdp.legal_actions(s).contains(&a) {
        return Err(OreoError::Domain(format!("token {a} is not legal in {s:?}")));
    }
    Ok(())
}

pub fn transition<M: TaskMdp + ?Sized>(mdp: &M, s: &State, a: TokenId) -> Result<State> {
    mdp.transition(s, a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: State,
    pub action: TokenId,
    pub reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_state: State,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn initial_state(&self) -> &State {
        self.steps.first().map(|s| &s.state).unwrap_or(&self.final_state)
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// `states()[t]` is s_t for t in 0..=T (the last entry is the final state).
    pub fn states(&self) -> impl Iterator<Item = &State> {
        self.steps
            .iter()
            .map(|s| &s.state)
            .chain(std::iter::once(&self.final_state))
    }

    /// Successor of step `t`.
    pub fn next_state(&self, t: usize) -> &State {
        self.steps.get(t + 1).map(|s| &s.state).unwrap_or(&self.final_state)
    }

    /// Check transition consistency, reward labels, sparsity and termination.
    pub fn validate<M: TaskMdp + ?Sized>(&self, mdp: &M) -> Result<()> {
        if !self.final_state.is_terminal() {
            return Err(OreoError::Contract(format!(
                "trajectory ends in non-terminal {:?}",
                self.final_state
            )));
        }
        let last = self.steps.len().saturating_sub(1);
        for (t, step) in self.steps.iter().enumerate() {
            let next = mdp.transition(&step.state, step.action)?;
            if &next != self.next_state(t)
                || next.boundaries() != self.next_state(t).boundaries()
                || next.is_terminal() != self.next_state(t).is_terminal()
            {
                return Err(OreoError::Contract(format!(
                    "step {t}: stored successor differs from transition"
                )));
            }
            let r = mdp.reward(&step.state, step.action)?;
            if r != step.reward {
                return Err(OreoError::Contract(format!(
                    "step {t}: stored reward {} but MDP gives {r}",
                    step.reward
                )));
            }
            if t != last && step.reward != 0.0 {
                return Err(OreoError::Contract(format!("non-terminal reward at step {t}")));
            }
        }
        Ok(())
    }
}

/// `out[t] = Σ_{i≥t} r_i`, summed sequentially from the end.
pub fn suffix_returns(traj: &Trajectory) -> Vec<f64> {
    let mut out = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for t in (0..traj.len()).rev() {
        acc += traj.steps[t].reward;
        out[t] = acc;
    }
    out
}

/// Roll out from `s0`, asking `choose` for the index of the legal action to take.
pub fn rollout<M, F>(mdp: &M, s0: &State, mut choose: F) -> Result<Trajectory>
where
    M: TaskMdp + ?Sized,
    F: FnMut(&State, &[TokenId]) -> Result<usize>,
{
    let mut steps = Vec::new();
    let mut s = s0.clone();
    while !s.is_terminal() {
        if steps.len() >= mdp.horizon() {
            return Err(OreoError::Contract(format!(
                "rollout exceeded horizon {} without terminating",
                mdp.horizon()
            )));
        }
        let actions = mdp.legal_actions(&s);
        let idx = choose(&s, &actions)?;
        let a = *actions
            .get(idx)
            .ok_or_else(|| OreoError::Domain(format!("action index {idx} out of range")))?;
        let reward = mdp.reward(&s, a)?;
        let next = mdp.transition(&s, a)?;
        steps.push(Step {
            state: s,
            action: a,
            reward,
        });
        s = next;
    }
    Ok(Trajectory { steps, final_state: s })
}

/// All states reachable from the initial states, in depth-first preorder.
pub fn enumerate_states<M: TaskMdp + ?Sized>(mdp: &M, cap: usize) -> Result<Vec<State>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut stack: Vec<State> = mdp.initial_states().into_iter().rev().collect();
    while let Some(s) = stack.pop() {
        if !seen.insert(s.tokens().to_vec()) {
            continue;
        }
        if out.len() >= cap {
            return Err(OreoError::Resource(format!("reachable state set exceeds cap {cap}")));
        }
        if !s.is_terminal() {
            for &a in mdp.legal_actions(&s).iter().rev() {
                stack.push(mdp.transition(&s, a)?);
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Every complete trajectory from `s0`, in lexicographic action order.
pub fn enumerate_trajectories<M: TaskMdp + ?Sized>(mdp: &M, s0: &State, cap: usize) -> Result<Vec<Trajectory>> {
    fn walk<M: TaskMdp + ?Sized>(
        mdp: &M,
        s: &State,
        prefix: &mut Vec<Step>,
        out: &mut Vec<Trajectory>,
        cap: usize,
    ) -> Result<()> {
        if s.is_terminal() {
            if out.len() >= cap {
                return Err(OreoError::Resource(format!("trajectory enumeration exceeds cap {cap}")));
            }
            out.push(Trajectory {
                steps: prefix.clone(),
                final_state: s.clone(),
            });
            return Ok(());
        }
        for a in mdp.legal_actions(s) {
            let reward = mdp.reward(s, a)?;
            let next = mdp.transition(s, a)?;
            prefix.push(Step {
                state: s.clone(),
                action: a,
                reward,
            });
            walk(mdp, &next, prefix, out, cap)?;
            prefix.pop();
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(mdp, s0, &mut Vec::new(), &mut out, cap)?;
    Ok(out)
}

/// Afterstate keys `s ∥ a` of every transition that appends observations.
/// Empty for MDPs without observations.
pub fn enumerate_afterstates<M: TaskMdp + ?Sized>(mdp: &M, states: &[State]) -> Result<Vec<Vec<TokenId>>> {
    let mut out = Vec::new();
    if !mdp.emits_observations() {
        return Ok(out);
    }
    for s in states.iter().filter(|s| !s.is_terminal()) {
        for a in mdp.legal_actions(s) {
            let next = mdp.transition(s, a)?;
            if next.len() > s.len() + 1 {
                out.push(s.afterstate_key(a));
            }
        }
    }
    Ok(out)
}
