use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::mdp::{check_action, State, TaskMdp, TokenId};

const PROMPT_LEN: usize = 2;

/// Step-by-step modular addition.
///
/// The prompt is `[a, b]`. The running total starts at `a` and each of the
/// `depth` steps adds `b` (mod `vocab`). A step is `step_len` tokens; only the
/// last token of a step is checked, the others are free scratch tokens.
/// Reward is 1 iff every step's checked token equals the running total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DigitChainSpec {
    pub vocab: usize,
    pub depth: usize,
    pub step_len: usize,
    /// Number of task instances.
    pub instances: usize,
    /// Instance seeds are `first_instance..first_instance + instances`; seed
    /// `k` yields `a = k mod V`, `b = (k / V) mod V`.
    pub first_instance: u64,
}

impl Default for DigitChainSpec {
    fn default() -> Self {
        Self {
            vocab: 5,
            depth: 2,
            step_len: 1,
            instances: 1,
            first_instance: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DigitChain {
    spec: DigitChainSpec,
}

impl DigitChain {
    pub fn new(spec: DigitChainSpec) -> Result<Self> {
        if spec.vocab < 2 {
            return Err(OreoError::Config("digit-chain needs vocab >= 2".into()));
        }
        if spec.depth == 0 {
            return Err(OreoError::Config("digit-chain needs depth >= 1".into()));
        }
        if spec.step_len == 0 {
            return Err(OreoError::Config("digit-chain needs step_len >= 1".into()));
        }
        if spec.instances == 0 {
            return Err(OreoError::Config("digit-chain needs at least one instance".into()));
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &DigitChainSpec {
        &self.spec
    }

    pub fn operands(&self, instance_seed: u64) -> (TokenId, TokenId) {
        let v = self.spec.vocab as u64;
        ((instance_seed % v) as TokenId, ((instance_seed / v) % v) as TokenId)
    }

    /// Checked token of step `k` (0-based) for the prompt `[a, b]`.
    pub fn expected(&self, a: TokenId, b: TokenId, k: usize) -> TokenId {
        let v = self.spec.vocab as u64;
        ((a as u64 + (k as u64 + 1) * b as u64) % v) as TokenId
    }

    fn generated(&self, s: &State) -> usize {
        s.len() - PROMPT_LEN
    }

    fn total_len(&self) -> usize {
        self.spec.depth * self.spec.step_len
    }
}

impl TaskMdp for DigitChain {
    fn env_id(&self) -> &str {
        "digit-chain"
    }

    fn vocab_size(&self) -> usize {
        self.spec.vocab
    }

    fn initial_states(&self) -> Vec<State> {
        let lo = self.spec.first_instance;
        (lo..lo + self.spec.instances as u64)
            .map(|k| {
                let (a, b) = self.operands(k);
                State::prompt(vec![a, b])
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
        let g = self.generated(s) + 1;
        let close = g.is_multiple_of(self.spec.step_len);
        Ok(s.extend(a, &[], close, g == self.total_len()))
    }

    fn reward(&self, s: &State, a: TokenId) -> Result<f64> {
        check_action(self, s, a)?;
        if self.generated(s) + 1 != self.total_len() {
            return Ok(0.0);
        }
        let toks = s.tokens();
        let (x, y) = (toks[0], toks[1]);
        let gen = &toks[PROMPT_LEN..];
        let correct = (0..self.spec.depth).all(|k| {
            let pos = (k + 1) * self.spec.step_len - 1;
            let tok = if pos == gen.len() { a } else { gen[pos] };
            tok == self.expected(x, y, k)
        });
        Ok(if correct { 1.0 } else { 0.0 })
    }

    fn horizon(&self) -> usize {
        self.total_len()
    }
}
