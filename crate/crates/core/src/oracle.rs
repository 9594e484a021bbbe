//! Exact optimal soft value, soft Q and optimal policy of a finite token MDP
//! under KL regularization to a reference policy, plus verifiers.
//!
//! With reward shaping `r(s,a) + β·log π_ref(a|s)` the KL-regularized
//! objective becomes a maximum-entropy one, and on a deterministic tree:
//!
//! ```text
//! Q*(s,a) = r(s,a) + β·log π_ref(a|s) + V*(s')
//! V*(s)   = β·log Σ_a exp(Q*(s,a)/β)
//! π*(a|s) = exp((Q*(s,a) − V*(s))/β)
//! V*(terminal) = 0
//! ```

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{OreoError, Result};
use crate::mdp::{enumerate_states, logsumexp, PolicyTable, State, TaskMdp, TokenId, ValueTable};

/// Log probabilities are clamped here before exponentiation.
pub const LOG_PROB_FLOOR: f64 = -700.0;

#[derive(Clone, Debug)]
pub struct OracleResult {
    pub v_star: ValueTable,
    pub q_star: IndexMap<(Vec<TokenId>, TokenId), f64>,
    /// Logits are the clamped optimal log-probabilities.
    pub pi_star: PolicyTable,
    pub beta: f64,
}

impl OracleResult {
    pub fn v0(&self, s0: &State) -> f64 {
        self.v_star.get(s0).expect("oracle covers initial states")
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(OreoError::Config(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}

fn ref_log_probs(reference: &PolicyTable, s: &State, actions: &[TokenId]) -> Result<Vec<f64>> {
    let entry = reference.entry(s)?;
    if entry.actions != actions {
        return Err(OreoError::Contract(format!(
            "reference action set differs from legal actions at {s:?}"
        )));
    }
    let lp = entry.log_probs();
    if lp.contains(&f64::NEG_INFINITY) {
        return Err(OreoError::UnsupportedSupport(format!(
            "reference has a support hole at {s:?}"
        )));
    }
    Ok(lp)
}

/// Memoized depth-first backward induction from every initial state.
pub fn soft_backward_induction<M: TaskMdp + ?Sized>(
    mdp: &M,
    reference: &PolicyTable,
    beta: f64,
    cap: usize,
) -> Result<OracleResult> {
    check_beta(beta)?;
    struct Ctx<'a, M: ?Sized> {
        mdp: &'a M,
        reference: &'a PolicyTable,
        beta: f64,
        cap: usize,
        v: HashMap<Vec<TokenId>, f64>,
        out: OracleResult,
    }

    fn visit<M: TaskMdp + ?Sized>(cx: &mut Ctx<'_, M>, s: &State) -> Result<f64> {
        if s.is_terminal() {
            return Ok(0.0);
        }
        if let Some(v) = cx.v.get(s.tokens()) {
            return Ok(*v);
        }
        if cx.v.len() >= cx.cap {
            return Err(OreoError::Resource(format!("state space exceeds cap {}", cx.cap)));
        }
        let actions = cx.mdp.legal_actions(s);
        let ref_lp = ref_log_probs(cx.reference, s, &actions)?;
        let mut q = Vec::with_capacity(actions.len());
        for (&a, lp) in actions.iter().zip(&ref_lp) {
            let r = cx.mdp.reward(s, a)?;
            let next = cx.mdp.transition(s, a)?;
            let v_next = visit(cx, &next)?;
            q.push(r + cx.beta * lp + v_next);
        }
        let scaled: Vec<f64> = q.iter().map(|x| x / cx.beta).collect();
        let v = cx.beta * logsumexp(&scaled);
        let logits: Vec<f64> = q.iter().map(|x| ((x - v) / cx.beta).max(LOG_PROB_FLOOR)).collect();
        for (&a, qa) in actions.iter().zip(&q) {
            cx.out.q_star.insert((s.tokens().to_vec(), a), *qa);
        }
        cx.out.pi_star.insert(s.tokens().to_vec(), actions, logits)?;
        cx.out.v_star.set(s.tokens().to_vec(), v);
        cx.v.insert(s.tokens().to_vec(), v);
        Ok(v)
    }

    let mut cx = Ctx {
        mdp,
        reference,
        beta,
        cap,
        v: HashMap::new(),
        out: OracleResult {
            v_star: ValueTable::new(),
            q_star: IndexMap::new(),
            pi_star: PolicyTable::new(),
            beta,
        },
    };
    for s0 in mdp.initial_states() {
        visit(&mut cx, &s0)?;
    }
    Ok(cx.out)
}

/// β·log Σ_τ (Π_t π_ref(a_t|s_t))·exp(R(τ)/β) by exhaustive path enumeration.
pub fn brute_force_soft_value<M: TaskMdp + ?Sized>(
    mdp: &M,
    reference: &PolicyTable,
    beta: f64,
    s: &State,
    cap: usize,
) -> Result<f64> {
    check_beta(beta)?;
    // (state, accumulated log-ref-prob, accumulated reward)
    let mut stack = vec![(s.clone(), 0.0f64, 0.0f64)];
    let mut log_weights = Vec::new();
    while let Some((cur, log_ref, ret)) = stack.pop() {
        if cur.is_terminal() {
            if log_weights.len() >= cap {
                return Err(OreoError::Resource(format!(
                    "more than {cap} trajectories to enumerate"
                )));
            }
            log_weights.push(log_ref + ret / beta);
            continue;
        }
        let actions = mdp.legal_actions(&cur);
        let lp = ref_log_probs(reference, &cur, &actions)?;
        for (&a, l) in actions.iter().zip(lp) {
            let r = mdp.reward(&cur, a)?;
            stack.push((mdp.transition(&cur, a)?, log_ref + l, ret + r));
        }
    }
    Ok(beta * logsumexp(&log_weights))
}

/// max over reachable (s,a) of |V(s) − V(s') − r(s,a) + β·log(π(a|s)/π_ref(a|s))|.
pub fn bellman_residual<M: TaskMdp + ?Sized>(
    pi: &PolicyTable,
    v: &ValueTable,
    mdp: &M,
    reference: &PolicyTable,
    beta: f64,
    cap: usize,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for s in enumerate_states(mdp, cap)? {
        if s.is_terminal() {
            continue;
        }
        let actions = mdp.legal_actions(&s);
        let pe = pi.entry(&s)?;
        if pe.actions != actions {
            return Err(OreoError::Contract(format!(
                "policy action set differs from legal actions at {s:?}"
            )));
        }
        let lp = pe.log_probs();
        let lq = ref_log_probs(reference, &s, &actions)?;
        let vs = v.get(&s)?;
        for (i, &a) in actions.iter().enumerate() {
            let next = mdp.transition(&s, a)?;
            let r = mdp.reward(&s, a)?;
            let res = vs - v.get(&next)? - r + beta * (lp[i] - lq[i]);
            worst = worst.max(res.abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{Keyhole, KeyholeSpec, TreeMdp};
    use crate::mdp::{total_variation, DEFAULT_ENUM_CAP};

    const CAP: usize = DEFAULT_ENUM_CAP;

    #[test]
    fn zero_reward_gives_reference() {
        let mdp = TreeMdp::new(3, 3, |_| 0.0).unwrap();
        let reference = PolicyTable::from_fn(&mdp, CAP, |s, a| {
            a.iter().map(|x| (*x as f64) * 0.3 + s.len() as f64).collect()
        })
        .unwrap();
        for beta in [0.1, 1.0, 7.0] {
            let out = soft_backward_induction(&mdp, &reference, beta, CAP).unwrap();
            for (key, v) in out.v_star.iter() {
                assert!(v.abs() < 1e-12, "V*({key:?}) = {v}");
            }
            for (key, e) in out.pi_star.iter() {
                let p = e.probs();
                let q = reference.get(key).unwrap().probs();
                assert!(total_variation(&p, &q) < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_bandit() {
        let mdp = TreeMdp::bandit(&[1.0, 0.0]).unwrap();
        let reference = PolicyTable::uniform(&mdp, CAP).unwrap();
        let out = soft_backward_induction(&mdp, &reference, 1.0, CAP).unwrap();
        let s0 = &mdp.initial_states()[0];
        // brute-force over both trajectories: log(0.5 e + 0.5)
        let expect = (0.5 * 1f64.exp() + 0.5).ln();
        assert!((out.v0(s0) - expect).abs() < 1e-15);
        assert!((out.v0(s0) - 0.6201).abs() < 1e-4);
        let p = out.pi_star.probs(s0).unwrap();
        assert!((p[0] - 0.7311).abs() < 1e-4);
        let bf = brute_force_soft_value(&mdp, &reference, 1.0, s0, CAP).unwrap();
        assert!((bf - out.v0(s0)).abs() < 1e-10);

        let hot = soft_backward_induction(&mdp, &reference, 100.0, CAP).unwrap();
        let tv = total_variation(&hot.pi_star.probs(s0).unwrap(), &[0.5, 0.5]);
        assert!(tv < 0.01);
    }

    #[test]
    fn depth_three_binary_tree_one_rewarded_leaf() {
        let mdp = TreeMdp::new(2, 3, |p| if p == [1, 1, 1] { 1.0 } else { 0.0 }).unwrap();
        let reference = PolicyTable::uniform(&mdp, CAP).unwrap();
        let s0 = &mdp.initial_states()[0];
        let bf = brute_force_soft_value(&mdp, &reference, 1.0, s0, CAP).unwrap();
        let expect = (7.0 / 8.0 + 1f64.exp() / 8.0).ln();
        assert!((bf - expect).abs() < 1e-14);
        let zero = TreeMdp::new(2, 3, |_| 0.0).unwrap();
        assert_eq!(brute_force_soft_value(&zero, &reference, 1.0, s0, CAP).unwrap(), 0.0);
        assert!(matches!(
            brute_force_soft_value(&mdp, &reference, 1.0, s0, 5),
            Err(OreoError::Resource(_))
        ));
    }

    #[test]
    fn residual_examples() {
        let zero = TreeMdp::new(2, 2, |_| 0.0).unwrap();
        let reference = PolicyTable::uniform(&zero, CAP).unwrap();
        let v = ValueTable::zeros(&zero, CAP).unwrap();
        assert_eq!(
            bellman_residual(&reference, &v, &zero, &reference, 1.0, CAP).unwrap(),
            0.0
        );
        let one = TreeMdp::new(2, 2, |p| if p == [0, 1] { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(
            bellman_residual(&reference, &v, &one, &reference, 1.0, CAP).unwrap(),
            1.0
        );
        let out = soft_backward_induction(&one, &reference, 0.7, CAP).unwrap();
        let res = bellman_residual(&out.pi_star, &out.v_star, &one, &reference, 0.7, CAP).unwrap();
        assert!(res <= 1e-9);
        let empty = ValueTable::new();
        assert!(matches!(
            bellman_residual(&reference, &empty, &one, &reference, 1.0, CAP),
            Err(OreoError::Contract(_))
        ));
    }

    #[test]
    fn support_hole_and_cap_errors() {
        let mdp = TreeMdp::bandit(&[1.0, 0.0]).unwrap();
        let mut holed = PolicyTable::new();
        holed.insert(vec![0], vec![0, 1], vec![0.0, f64::NEG_INFINITY]).unwrap();
        assert!(matches!(
            soft_backward_induction(&mdp, &holed, 1.0, CAP),
            Err(OreoError::UnsupportedSupport(_))
        ));
        let big = Keyhole::new(KeyholeSpec {
            vocab: 2,
            depth: 6,
            key_position: 2,
            ..Default::default()
        })
        .unwrap();
        let reference = PolicyTable::uniform(&big, CAP).unwrap();
        assert!(matches!(
            soft_backward_induction(&big, &reference, 1.0, 10),
            Err(OreoError::Resource(_))
        ));
    }

    #[test]
    fn keyhole_oracle_concentrates_on_key() {
        let mdp = Keyhole::new(KeyholeSpec::default()).unwrap();
        let reference = PolicyTable::uniform(&mdp, CAP).unwrap();
        let s0 = &mdp.initial_states()[0];
        let cold = soft_backward_induction(&mdp, &reference, 0.05, CAP).unwrap();
        let p = cold.pi_star.probs(s0).unwrap();
        assert!(p[1] >= 0.99);
        // positions other than the key are free: π* equals the reference there
        for beta in [0.05, 0.5, 3.0] {
            let out = soft_backward_induction(&mdp, &reference, beta, CAP).unwrap();
            for (key, e) in out.pi_star.iter() {
                if key.len() > 1 {
                    assert!(total_variation(&e.probs(), &[0.5, 0.5]) <= 1e-6);
                }
            }
        }
    }
}
