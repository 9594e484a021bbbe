use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::mdp::{check_action, State, TaskMdp, TokenId};

/// Credit-assignment stress test: `depth` free tokens, of which only the one
/// at `key_position` matters. Reward is `reward` iff it equals `key_token`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyholeSpec {
    pub vocab: usize,
    pub depth: usize,
    pub key_position: usize,
    pub key_token: TokenId,
    pub step_len: usize,
    /// Terminal reward magnitude; 0 yields a reward-free tree.
    pub reward: f64,
    pub instances: usize,
}

impl Default for KeyholeSpec {
    fn default() -> Self {
        Self {
            vocab: 2,
            depth: 3,
            key_position: 0,
            key_token: 1,
            step_len: 1,
            reward: 1.0,
            instances: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Keyhole {
    spec: KeyholeSpec,
    prompt_len: usize,
}

impl Keyhole {
    pub fn new(spec: KeyholeSpec) -> Result<Self> {
        if spec.vocab < 2 || spec.depth == 0 {
            return Err(OreoError::Config("keyhole needs vocab >= 2 and depth >= 1".into()));
        }
        if spec.key_position >= spec.depth {
            return Err(OreoError::Config(format!(
                "key position {} must be < depth {}",
                spec.key_position, spec.depth
            )));
        }
        if spec.key_token as usize >= spec.vocab {
            return Err(OreoError::Config("key token outside the vocabulary".into()));
        }
        if spec.step_len == 0 || !spec.depth.is_multiple_of(spec.step_len) {
            return Err(OreoError::Config("step_len must divide depth".into()));
        }
        if spec.instances == 0 || !spec.reward.is_finite() {
            return Err(OreoError::Config(
                "keyhole needs >= 1 instance and a finite reward".into(),
            ));
        }
        let mut prompt_len = 1;
        while (spec.vocab as u128).pow(prompt_len as u32) < spec.instances as u128 {
            prompt_len += 1;
        }
        Ok(Self { spec, prompt_len })
    }

    pub fn spec(&self) -> &KeyholeSpec {
        &self.spec
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }
}

impl TaskMdp for Keyhole {
    fn env_id(&self) -> &str {
        "keyhole"
    }

    fn vocab_size(&self) -> usize {
        self.spec.vocab
    }

    fn initial_states(&self) -> Vec<State> {
        let v = self.spec.vocab as u64;
        (0..self.spec.instances as u64)
            .map(|i| {
                let mut digits = vec![0; self.prompt_len];
                let mut rest = i;
                for d in digits.iter_mut().rev() {
                    *d = (rest % v) as TokenId;
                    rest /= v;
                }
                State::prompt(digits)
            })
            .collect()
    }

    fn legal_actions(&self, s: &State) -> Vec<TokenId> {
        if s.is_terminal() {
            return Vec::new();
        }
        (0..self.spec.vocab as TokenId).collect()
    }

    fn transition(&self, s: &State, a: TokenId) -> Result<State> {
        check_action(self, s, a)?;
        let g = s.len() - self.prompt_len + 1;
        Ok(s.extend(a, &[], g.is_multiple_of(self.spec.step_len), g == self.spec.depth))
    }

    fn reward(&self, s: &State, a: TokenId) -> Result<f64> {
        check_action(self, s, a)?;
        let g = s.len() - self.prompt_len;
        if g + 1 != self.spec.depth {
            return Ok(0.0);
        }
        let key = if self.spec.key_position == g {
            a
        } else {
            s.tokens()[self.prompt_len + self.spec.key_position]
        };
        Ok(if key == self.spec.key_token {
            self.spec.reward
        } else {
            0.0
        })
    }

    fn horizon(&self) -> usize {
        self.spec.depth
    }
}
