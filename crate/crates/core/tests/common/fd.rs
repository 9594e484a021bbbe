//! Random configurations and finite-difference gradient checks.

use oreo_core::baselines::{dpo_loss_gradients, PreferencePair};
use oreo_core::envs::{
    sample_trajectory, DigitChain, DigitChainSpec, Env, Gridworld, GridworldSpec, Keyhole, KeyholeSpec, TreeMdp,
};
use oreo_core::mdp::{PolicyTable, TaskMdp, Trajectory, ValueTable, DEFAULT_ENUM_CAP};
use oreo_core::trainer::{loss_gradients, Variant};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{central, close, dpo_loss, policy_objective, value_objective};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-8;

pub enum AnyMdp {
    Tree(TreeMdp),
    Env(Env),
}

impl AnyMdp {
    pub fn get(&self) -> &dyn TaskMdp {
        match self {
            AnyMdp::Tree(t) => t,
            AnyMdp::Env(e) => e,
        }
    }
}

pub struct Config {
    pub mdp: AnyMdp,
    pub pi: PolicyTable,
    pub reference: PolicyTable,
    pub value: ValueTable,
    pub batch: Vec<Trajectory>,
    pub beta: f64,
    pub alpha: f64,
}

/// A random small MDP with random tables and a sampled batch; `seed % 4`
/// picks the family.
pub fn random_config(seed: u64) -> Config {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = match seed % 4 {
        0 => AnyMdp::Tree(TreeMdp::random(rng.gen_range(2..=3), rng.gen_range(1..=3), &mut rng).unwrap()),
        1 => AnyMdp::Env(Env::DigitChain(
            DigitChain::new(DigitChainSpec {
                vocab: 3,
                depth: 2,
                step_len: rng.gen_range(1..=2),
                instances: 2,
                first_instance: rng.gen_range(0..9),
            })
            .unwrap(),
        )),
        2 => AnyMdp::Env(Env::Gridworld(
            Gridworld::new(GridworldSpec {
                horizon: 3,
                ..Default::default()
            })
            .unwrap(),
        )),
        _ => AnyMdp::Env(Env::Keyhole(
            Keyhole::new(KeyholeSpec {
                vocab: 3,
                depth: 2,
                step_len: rng.gen_range(1..=2),
                key_position: rng.gen_range(0..2),
                ..Default::default()
            })
            .unwrap(),
        )),
    };
    let m = mdp.get();
    let pi = PolicyTable::from_fn(m, DEFAULT_ENUM_CAP, |_, a| {
        a.iter().map(|_| rng.gen_range(-2.0..2.0)).collect()
    })
    .unwrap();
    let reference = PolicyTable::from_fn(m, DEFAULT_ENUM_CAP, |_, a| {
        a.iter().map(|_| rng.gen_range(-1.0..1.0)).collect()
    })
    .unwrap();
    let mut value = ValueTable::zeros(m, DEFAULT_ENUM_CAP).unwrap();
    for i in 0..value.len() {
        *value.value_at_mut(i) = rng.gen_range(-1.0..1.0);
    }
    let starts = m.initial_states();
    let n = rng.gen_range(1..=3);
    let batch = (0..n)
        .map(|_| {
            let s0 = &starts[rng.gen_range(0..starts.len())];
            sample_trajectory(m, &pi, s0, &mut rng).unwrap()
        })
        .collect();
    let beta = if rng.gen_bool(0.5) { 0.1 } else { 1.0 };
    let alpha = if rng.gen_bool(0.5) { 0.0 } else { 0.1 };
    Config {
        mdp,
        pi,
        reference,
        value,
        batch,
        beta,
        alpha,
    }
}

#[derive(Debug, Default)]
pub struct CheckReport {
    pub coords: usize,
    pub failures: usize,
    pub worst_rel: f64,
}

impl CheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        self.coords += 1;
        if !close(analytic, numeric, REL_TOL, ABS_FLOOR) {
            self.failures += 1;
        }
        let d = (analytic - numeric).abs();
        if d > ABS_FLOOR {
            self.worst_rel = self.worst_rel.max(d / analytic.abs().max(numeric.abs()));
        }
    }

    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

fn mean<T>(items: &[T], f: impl Fn(&T) -> f64) -> f64 {
    items.iter().map(f).sum::<f64>() / items.len() as f64
}

/// Value-table gradient against finite differences of the reference value objective.
pub fn check_value_grad(c: &Config, variant: Variant) -> CheckReport {
    let g = loss_gradients(&c.batch, &c.value, &c.pi, &c.reference, c.beta, c.alpha, variant).unwrap();
    let mut rep = CheckReport::default();
    let mut value = c.value.clone();
    for i in 0..value.len() {
        let x0 = value.value_at(i);
        let num = central(x0, FD_STEP, |x| {
            *value.value_at_mut(i) = x;
            mean(&c.batch, |t| {
                value_objective(t, &value, &c.pi, &c.reference, c.beta, variant)
            })
        });
        *value.value_at_mut(i) = x0;
        rep.record(g.value[i], num);
    }
    rep
}

/// Policy-logit gradient against finite differences of the reference policy
/// objective with the future log-ratio sum frozen at the current logits.
pub fn check_policy_grad(c: &Config, variant: Variant) -> CheckReport {
    let g = loss_gradients(&c.batch, &c.value, &c.pi, &c.reference, c.beta, c.alpha, variant).unwrap();
    let frozen = c.pi.clone();
    let mut rep = CheckReport::default();
    let mut pi = c.pi.clone();
    for i in 0..pi.len() {
        for b in 0..pi.entry_at(i).1.logits.len() {
            let x0 = pi.entry_at(i).1.logits[b];
            let num = central(x0, FD_STEP, |x| {
                pi.logits_at_mut(i)[b] = x;
                mean(&c.batch, |t| {
                    policy_objective(t, &c.value, &pi, Some(&frozen), &c.reference, c.beta, c.alpha, variant)
                })
            });
            pi.logits_at_mut(i)[b] = x0;
            rep.record(g.policy[i][b], num);
        }
    }
    rep
}

/// Pairs of independently sampled trajectories from the same task.
pub fn random_pairs(c: &Config, seed: u64) -> Vec<PreferencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let m = c.mdp.get();
    let starts = m.initial_states();
    (0..rng.gen_range(1..=3))
        .map(|_| {
            let s0 = starts[rng.gen_range(0..starts.len())].clone();
            PreferencePair {
                task: s0.tokens().to_vec(),
                winner: sample_trajectory(m, &c.pi, &s0, &mut rng).unwrap(),
                loser: sample_trajectory(m, &c.pi, &s0, &mut rng).unwrap(),
            }
        })
        .collect()
}

#[allow(clippy::needless_range_loop)]
pub fn check_dpo_grad(c: &Config, pairs: &[PreferencePair], beta: f64) -> CheckReport {
    let (_, g) = dpo_loss_gradients(pairs, &c.pi, &c.reference, beta).unwrap();
    let mut rep = CheckReport::default();
    let mut pi = c.pi.clone();
    for i in 0..pi.len() {
        for b in 0..pi.entry_at(i).1.logits.len() {
            let x0 = pi.entry_at(i).1.logits[b];
            let num = central(x0, FD_STEP, |x| {
                pi.logits_at_mut(i)[b] = x;
                mean(pairs, |p| dpo_loss(p, &pi, &c.reference, beta))
            });
            pi.logits_at_mut(i)[b] = x0;
            rep.record(g[i][b], num);
        }
    }
    rep
}
