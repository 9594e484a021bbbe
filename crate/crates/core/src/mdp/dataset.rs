//! Offline datasets and their JSONL interchange format.
//!
//! One trajectory per line:
//!
//! ```text
//! {"env_id":"keyhole","prompt":[0],"steps":[{"action":[1],"obs":[]},...],"reward":1.0}
//! ```
//!
//! A record step is a run of agent tokens followed by the observation tokens
//! the environment appended after the last of them. Runs are split at step
//! boundaries and after every observation.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{State, Step, TaskMdp, TokenId, Trajectory};
use crate::error::{OreoError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub action: Vec<TokenId>,
    pub obs: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub env_id: String,
    pub prompt: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    pub reward: f64,
}

impl TrajectoryRecord {
    pub fn from_trajectory(env_id: &str, traj: &Trajectory) -> Self {
        let mut steps = Vec::new();
        let mut action = Vec::new();
        for (t, step) in traj.steps.iter().enumerate() {
            let next = traj.next_state(t);
            action.push(step.action);
            let obs = &next.tokens()[step.state.len() + 1..];
            if !obs.is_empty() || next.at_boundary() || t + 1 == traj.len() {
                steps.push(StepRecord {
                    action: std::mem::take(&mut action),
                    obs: obs.to_vec(),
                });
            }
        }
        Self {
            env_id: env_id.to_string(),
            prompt: traj.initial_state().tokens().to_vec(),
            steps,
            reward: traj.total_reward(),
        }
    }

    /// Replay the record through `mdp`, checking observations and the reward label.
    pub fn to_trajectory<M: TaskMdp + ?Sized>(&self, mdp: &M, initial: &State) -> Result<Trajectory> {
        if initial.tokens() != self.prompt.as_slice() {
            return Err(OreoError::Contract("record prompt does not match initial state".into()));
        }
        let mut s = initial.clone();
        let mut steps = Vec::new();
        for (k, rec) in self.steps.iter().enumerate() {
            if rec.action.is_empty() {
                return Err(OreoError::Parse(format!("record step {k} has no action tokens")));
            }
            for (i, &a) in rec.action.iter().enumerate() {
                let reward = mdp.reward(&s, a)?;
                let next = mdp.transition(&s, a)?;
                let appended = &next.tokens()[s.len() + 1..];
                let expected: &[TokenId] = if i + 1 == rec.action.len() { &rec.obs } else { &[] };
                if appended != expected {
                    return Err(OreoError::Parse(format!(
                        "record step {k}: environment appended {appended:?}, record says {expected:?}"
                    )));
                }
                steps.push(Step {
                    state: s,
                    action: a,
                    reward,
                });
                s = next;
            }
        }
        let traj = Trajectory { steps, final_state: s };
        if !traj.final_state.is_terminal() {
            return Err(OreoError::Parse("record does not reach a terminal state".into()));
        }
        if traj.total_reward() != self.reward {
            return Err(OreoError::Parse(format!(
                "reward label {} differs from recomputed {}",
                self.reward,
                traj.total_reward()
            )));
        }
        Ok(traj)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub env_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl OfflineDataset {
    pub fn new(env_id: impl Into<String>, trajectories: Vec<Trajectory>) -> Self {
        Self {
            env_id: env_id.into(),
            trajectories,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.trajectories.iter().filter(|t| t.total_reward() > 0.0).count()
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.positives() as f64 / self.len() as f64
    }

    /// Trajectory indices grouped by task key (the prompt), in first-seen order.
    pub fn groups(&self) -> IndexMap<Vec<TokenId>, Vec<usize>> {
        let mut out: IndexMap<Vec<TokenId>, Vec<usize>> = IndexMap::new();
        for (i, t) in self.trajectories.iter().enumerate() {
            out.entry(t.initial_state().tokens().to_vec()).or_default().push(i);
        }
        out
    }

    pub fn validate<M: TaskMdp + ?Sized>(&self, mdp: &M) -> Result<()> {
        for t in &self.trajectories {
            t.validate(mdp)?;
        }
        Ok(())
    }

    pub fn filter(&self, keep: impl Fn(&Trajectory) -> bool) -> Self {
        Self {
            env_id: self.env_id.clone(),
            trajectories: self.trajectories.iter().filter(|t| keep(t)).cloned().collect(),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = TrajectoryRecord> + '_ {
        self.trajectories
            .iter()
            .map(|t| TrajectoryRecord::from_trajectory(&self.env_id, t))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for rec in self.records() {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Parse and replay every line against `mdp`.
    pub fn read_jsonl<R: BufRead, M: TaskMdp + ?Sized>(r: R, mdp: &M) -> Result<Self> {
        let initial: HashMap<Vec<TokenId>, State> = mdp
            .initial_states()
            .into_iter()
            .map(|s| (s.tokens().to_vec(), s))
            .collect();
        let mut env_id = mdp.env_id().to_string();
        let mut trajectories = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TrajectoryRecord =
                serde_json::from_str(&line).map_err(|e| OreoError::Parse(format!("line {}: {e}", lineno + 1)))?;
            let s0 = initial.get(&rec.prompt).ok_or_else(|| {
                OreoError::Parse(format!(
                    "line {}: prompt {:?} is not a task instance of {}",
                    lineno + 1,
                    rec.prompt,
                    mdp.env_id()
                ))
            })?;
            trajectories.push(rec.to_trajectory(mdp, s0)?);
            env_id = rec.env_id;
        }
        Ok(Self { env_id, trajectories })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{DigitChain, DigitChainSpec, Gridworld, GridworldSpec};
    use crate::mdp::{enumerate_trajectories, DEFAULT_ENUM_CAP};

    #[test]
    fn jsonl_round_trip_with_observations() {
        let mdp = Gridworld::new(GridworldSpec {
            width: 3,
            height: 1,
            start: (0, 0),
            goal: (2, 0),
            horizon: 3,
            ..Default::default()
        })
        .unwrap();
        let s0 = mdp.initial_states().remove(0);
        let trajs = enumerate_trajectories(&mdp, &s0, DEFAULT_ENUM_CAP).unwrap();
        let ds = OfflineDataset::new(mdp.env_id(), trajs);
        let text = ds.to_jsonl_string();
        let back = OfflineDataset::read_jsonl(text.as_bytes(), &mdp).unwrap();
        assert_eq!(back, ds);
        let first: TrajectoryRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.steps.iter().all(|s| s.action.len() == 1 && s.obs.len() == 1));
    }

    #[test]
    fn multi_token_steps_group_into_one_record_step() {
        let mdp = DigitChain::new(DigitChainSpec {
            vocab: 3,
            depth: 2,
            step_len: 2,
            instances: 1,
            ..Default::default()
        })
        .unwrap();
        let s0 = mdp.initial_states().remove(0);
        let traj = enumerate_trajectories(&mdp, &s0, DEFAULT_ENUM_CAP).unwrap().remove(5);
        let rec = TrajectoryRecord::from_trajectory("d", &traj);
        assert_eq!(rec.steps.len(), 2);
        assert!(rec.steps.iter().all(|s| s.action.len() == 2));
        assert_eq!(rec.to_trajectory(&mdp, &s0).unwrap(), traj);
    }

    #[test]
    fn wrong_reward_label_is_rejected() {
        let mdp = DigitChain::new(DigitChainSpec::default()).unwrap();
        let s0 = mdp.initial_states().remove(0);
        let traj = enumerate_trajectories(&mdp, &s0, DEFAULT_ENUM_CAP).unwrap().remove(0);
        let mut rec = TrajectoryRecord::from_trajectory("d", &traj);
        rec.reward = 1.0 - rec.reward;
        assert!(rec.to_trajectory(&mdp, &s0).is_err());
    }
}
