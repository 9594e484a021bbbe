//! Tabular policies and value functions keyed by exact token sequences.

use indexmap::IndexMap;

use super::{enumerate_afterstates, enumerate_states, fmt_tokens, State, TaskMdp, TokenId};
use crate::error::{OreoError, Result};

/// Stable log-sum-exp. Returns `-inf` when every input is `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|z| z - lse).collect()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEntry {
    /// Legal actions, ascending.
    pub actions: Vec<TokenId>,
    /// Raw logits aligned with `actions`. `-inf` marks a support hole.
    pub logits: Vec<f64>,
}

impl PolicyEntry {
    pub fn position(&self, a: TokenId) -> Option<usize> {
        self.actions.iter().position(|&b| b == a)
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn log_probs(&self) -> Vec<f64> {
        log_softmax(&self.logits)
    }
}

/// Per-state logits over legal actions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyTable {
    entries: IndexMap<Vec<TokenId>, PolicyEntry>,
}

impl PolicyTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: Vec<TokenId>, actions: Vec<TokenId>, logits: Vec<f64>) -> Result<()> {
        if actions.is_empty() || actions.len() != logits.len() {
            return Err(OreoError::Contract(format!(
                "policy entry [{}] needs one logit per action ({} actions, {} logits)",
                fmt_tokens(&key),
                actions.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|z| z.is_nan() || *z == f64::INFINITY) || logits.iter().all(|z| *z == f64::NEG_INFINITY) {
            return Err(OreoError::Numerical {
                state: fmt_tokens(&key),
                detail: "invalid logits".into(),
            });
        }
        self.entries.insert(key, PolicyEntry { actions, logits });
        Ok(())
    }

    /// Build a table over every reachable non-terminal state with logits from `f`.
    pub fn from_fn<M, F>(mdp: &M, cap: usize, mut f: F) -> Result<Self>
    where
        M: TaskMdp + ?Sized,
        F: FnMut(&State, &[TokenId]) -> Vec<f64>,
    {
        let mut table = Self::new();
        for s in enumerate_states(mdp, cap)? {
            if s.is_terminal() {
                continue;
            }
            let actions = mdp.legal_actions(&s);
            let logits = f(&s, &actions);
            table.insert(s.tokens().to_vec(), actions, logits)?;
        }
        Ok(table)
    }

    pub fn uniform<M: TaskMdp + ?Sized>(mdp: &M, cap: usize) -> Result<Self> {
        Self::from_fn(mdp, cap, |_, actions| vec![0.0; actions.len()])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, key: &[TokenId]) -> Option<usize> {
        self.entries.get_index_of(key)
    }

    pub fn get(&self, key: &[TokenId]) -> Option<&PolicyEntry> {
        self.entries.get(key)
    }

    pub fn entry(&self, s: &State) -> Result<&PolicyEntry> {
        self.entries
            .get(s.tokens())
            .ok_or_else(|| OreoError::Contract(format!("policy table has no entry for {s:?}")))
    }

    pub fn entry_at(&self, idx: usize) -> (&Vec<TokenId>, &PolicyEntry) {
        self.entries.get_index(idx).expect("policy index in range")
    }

    pub fn logits_at_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.entries.get_index_mut(idx).expect("policy index in range").1.logits
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<TokenId>, &PolicyEntry)> {
        self.entries.iter()
    }

    pub fn probs(&self, s: &State) -> Result<Vec<f64>> {
        Ok(self.entry(s)?.probs())
    }

    /// log π(a|s); an action outside the entry's action set is a domain error.
    pub fn log_prob(&self, s: &State, a: TokenId) -> Result<f64> {
        let entry = self.entry(s)?;
        let pos = entry
            .position(a)
            .ok_or_else(|| OreoError::Domain(format!("token {a} is not legal in {s:?}")))?;
        Ok(entry.log_probs()[pos])
    }
}

/// Per-state scalar values. Terminal states are pinned to zero and never stored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValueTable {
    values: IndexMap<Vec<TokenId>, f64>,
}

impl ValueTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zeros over every reachable non-terminal state, plus the pre-observation
    /// afterstates of MDPs that emit observations.
    pub fn zeros<M: TaskMdp + ?Sized>(mdp: &M, cap: usize) -> Result<Self> {
        let states = enumerate_states(mdp, cap)?;
        let mut table = Self::new();
        for s in states.iter().filter(|s| !s.is_terminal()) {
            table.values.insert(s.tokens().to_vec(), 0.0);
        }
        for key in enumerate_afterstates(mdp, &states)? {
            table.values.insert(key, 0.0);
        }
        Ok(table)
    }

    pub fn set(&mut self, key: Vec<TokenId>, v: f64) {
        self.values.insert(key, v);
    }

    /// V(s); terminal states are exactly 0, unseen non-terminal states are an error.
    pub fn get(&self, s: &State) -> Result<f64> {
        if s.is_terminal() {
            return Ok(0.0);
        }
        self.values
            .get(s.tokens())
            .copied()
            .ok_or_else(|| OreoError::Contract(format!("value table has no entry for {s:?}")))
    }

    pub fn get_key(&self, key: &[TokenId]) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn index_of(&self, key: &[TokenId]) -> Option<usize> {
        self.values.get_index_of(key)
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn value_at_mut(&mut self, idx: usize) -> &mut f64 {
        &mut self.values[idx]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<TokenId>, &f64)> {
        self.values.iter()
    }
}

fn ref_log_prob(reference: &PolicyTable, s: &State, a: TokenId) -> Result<f64> {
    let entry = reference.entry(s)?;
    let pos = entry
        .position(a)
        .ok_or_else(|| OreoError::UnsupportedSupport(format!("reference lacks action {a} at {s:?}")))?;
    let lp = entry.log_probs()[pos];
    if lp == f64::NEG_INFINITY {
        return Err(OreoError::UnsupportedSupport(format!(
            "reference gives zero probability to action {a} at {s:?}"
        )));
    }
    Ok(lp)
}

/// log π(a|s) − log π_ref(a|s).
pub fn log_ratio(pi: &PolicyTable, reference: &PolicyTable, s: &State, a: TokenId) -> Result<f64> {
    let lq = ref_log_prob(reference, s, a)?;
    Ok(pi.log_prob(s, a)? - lq)
}

/// Exact categorical KL(π(·|s) ‖ π_ref(·|s)).
pub fn kl_to_reference(pi: &PolicyTable, reference: &PolicyTable, s: &State) -> Result<f64> {
    let p = pi.entry(s)?;
    let q = reference.entry(s)?;
    if p.actions != q.actions {
        return Err(OreoError::Contract(format!(
            "action sets differ between policy and reference at {s:?}"
        )));
    }
    kl_from_logits(&p.logits, &q.logits)
        .map_err(|_| OreoError::UnsupportedSupport(format!("reference support hole under policy mass at {s:?}")))
}

/// KL between two softmax distributions given by logits; `Err(())` on a
/// support hole in the second argument.
pub(crate) fn kl_from_logits(p_logits: &[f64], q_logits: &[f64]) -> std::result::Result<f64, ()> {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let mut kl = 0.0;
    for (a, b) in lp.iter().zip(&lq) {
        let p = a.exp();
        if p == 0.0 {
            continue;
        }
        if *b == f64::NEG_INFINITY {
            return Err(());
        }
        kl += p * (a - b);
    }
    Ok(kl.max(0.0))
}

/// Σ log π(t_i | s t_1 … t_{i−1}) over the tokens of one step.
pub fn step_log_prob<M: TaskMdp + ?Sized>(
    pi: &PolicyTable,
    mdp: &M,
    s: &State,
    step_tokens: &[TokenId],
) -> Result<f64> {
    let mut total = 0.0;
    let mut cur = s.clone();
    for &tok in step_tokens {
        total += pi.log_prob(&cur, tok)?;
        cur = mdp.transition(&cur, tok)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Keyhole, KeyholeSpec};
    use proptest::prelude::*;

    fn single_state(logits: Vec<f64>) -> (PolicyTable, State) {
        let s = State::prompt(vec![0]);
        let mut t = PolicyTable::new();
        let actions = (0..logits.len() as TokenId).collect();
        t.insert(s.tokens().to_vec(), actions, logits).unwrap();
        (t, s)
    }

    #[test]
    fn log_ratio_examples() {
        let (pi, s) = single_state(vec![0.8f64.ln(), 0.2f64.ln()]);
        let (reference, _) = single_state(vec![0.0, 0.0]);
        assert_eq!(log_ratio(&reference, &reference, &s, 1).unwrap(), 0.0);
        let lr = log_ratio(&pi, &reference, &s, 0).unwrap();
        // independent: ln(0.8) - ln(0.5)
        assert!((lr - 1.6f64.ln()).abs() < 1e-14);
        assert!((lr - 0.4700).abs() < 1e-4);

        let (holed, _) = single_state(vec![0.0, f64::NEG_INFINITY]);
        assert!(matches!(
            log_ratio(&pi, &holed, &s, 1),
            Err(OreoError::UnsupportedSupport(_))
        ));
    }

    #[test]
    fn kl_examples() {
        let eps: f64 = 0.1;
        let (pi, s) = single_state(vec![(1.0 - eps).ln(), eps.ln()]);
        let (reference, _) = single_state(vec![0.0, 0.0]);
        assert_eq!(kl_to_reference(&reference, &reference, &s).unwrap(), 0.0);
        let brute = (1.0 - eps) * ((1.0 - eps) / 0.5).ln() + eps * (eps / 0.5).ln();
        let kl = kl_to_reference(&pi, &reference, &s).unwrap();
        assert!((kl - brute).abs() < 1e-14);
        assert!((kl - 0.3681).abs() < 1e-4);

        let (three, _) = single_state(vec![0.0, 0.0, 0.0]);
        assert!(matches!(
            kl_to_reference(&three, &reference, &s),
            Err(OreoError::Contract(_))
        ));
    }

    #[test]
    fn step_log_prob_examples() {
        let mdp = Keyhole::new(KeyholeSpec {
            vocab: 2,
            depth: 3,
            ..Default::default()
        })
        .unwrap();
        let pi = PolicyTable::uniform(&mdp, 1000).unwrap();
        let s0 = mdp.initial_states().remove(0);
        assert_eq!(step_log_prob(&pi, &mdp, &s0, &[]).unwrap(), 0.0);
        assert_eq!(
            step_log_prob(&pi, &mdp, &s0, &[1]).unwrap(),
            pi.log_prob(&s0, 1).unwrap()
        );
        assert!((step_log_prob(&pi, &mdp, &s0, &[1, 0]).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        assert!(matches!(
            step_log_prob(&pi, &mdp, &s0, &[1, 7]),
            Err(OreoError::Domain(_))
        ));
    }

    #[test]
    fn value_table_terminal_and_missing() {
        let mut v = ValueTable::new();
        let term = State::new(vec![1, 2], vec![2], true).unwrap();
        assert_eq!(v.get(&term).unwrap(), 0.0);
        let s = State::prompt(vec![1]);
        assert!(matches!(v.get(&s), Err(OreoError::Contract(_))));
        v.set(vec![1], 0.25);
        assert_eq!(v.get(&s).unwrap(), 0.25);
    }

    proptest! {
        #[test]
        fn softmax_normalizes(logits in prop::collection::vec(-50.0f64..50.0, 2..8)) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|x| *x > 0.0));
        }

        #[test]
        fn kl_nonnegative_and_shift_invariant(
            p in prop::collection::vec(-5.0f64..5.0, 3),
            q in prop::collection::vec(-5.0f64..5.0, 3),
            shift in -20.0f64..20.0,
        ) {
            let kl = kl_from_logits(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            let shifted: Vec<f64> = p.iter().map(|z| z + shift).collect();
            prop_assert!(kl_from_logits(&shifted, &p).unwrap() <= 1e-12);
        }
    }
}
