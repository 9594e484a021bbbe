//! Independent reference formulas used as test oracles. Nothing here calls
//! the library's loss code; only table accessors and MDP dynamics are shared.

#![allow(dead_code)]

pub mod fd;

use oreo_core::baselines::PreferencePair;
use oreo_core::mdp::{PolicyTable, State, Trajectory, ValueTable};
use oreo_core::trainer::Variant;

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|x| (x - m).exp()).sum();
    z.iter().map(|x| x - m - s.ln()).collect()
}

pub fn lp(pi: &PolicyTable, s: &State, a: u32) -> f64 {
    let e = pi.get(s.tokens()).expect("policy entry");
    let i = e.actions.iter().position(|x| *x == a).expect("legal action");
    log_softmax(&e.logits)[i]
}

pub fn lr(pi: &PolicyTable, reference: &PolicyTable, s: &State, a: u32) -> f64 {
    lp(pi, s, a) - lp(reference, s, a)
}

pub fn kl(pi: &PolicyTable, reference: &PolicyTable, s: &State) -> f64 {
    let p = log_softmax(&pi.get(s.tokens()).unwrap().logits);
    let q = log_softmax(&reference.get(s.tokens()).unwrap().logits);
    p.iter().zip(&q).map(|(a, b)| a.exp() * (a - b)).sum()
}

pub fn v(value: &ValueTable, s: &State) -> f64 {
    if s.is_terminal() {
        0.0
    } else {
        value.get_key(s.tokens()).expect("value entry")
    }
}

fn reward_from(traj: &Trajectory, t: usize) -> f64 {
    traj.steps[t..].iter().map(|s| s.reward).sum()
}

fn lr_from(traj: &Trajectory, pi: &PolicyTable, reference: &PolicyTable, t: usize) -> f64 {
    traj.steps[t..]
        .iter()
        .map(|s| lr(pi, reference, &s.state, s.action))
        .sum()
}

/// Segments `[start, end)` of each variant.
pub fn segments(traj: &Trajectory, variant: Variant) -> Vec<(usize, usize)> {
    let n = traj.len();
    match variant {
        Variant::Token => (0..n).map(|t| (t, t + 1)).collect(),
        Variant::Response => vec![(0, n)],
        Variant::Step => {
            let starts: Vec<usize> = (0..n).filter(|&t| traj.steps[t].state.at_boundary()).collect();
            (0..starts.len())
                .map(|k| (starts[k], *starts.get(k + 1).unwrap_or(&n)))
                .collect()
        }
    }
}

/// Value objective: squared residuals at every token (segment starts for
/// the step variant), plus the afterstate fit.
pub fn value_objective(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    variant: Variant,
) -> f64 {
    let points: Vec<usize> = match variant {
        Variant::Step => segments(traj, variant).into_iter().map(|s| s.0).collect(),
        _ => (0..traj.len()).collect(),
    };
    let mut total = 0.0;
    for &t in &points {
        let s = &traj.steps[t].state;
        let e = v(value, s) - reward_from(traj, t) + beta * lr_from(traj, pi, reference, t);
        total += e * e;
    }
    let mut after = 0.0;
    for (t, step) in traj.steps.iter().enumerate() {
        let next = traj.next_state(t);
        if next.len() > step.state.len() + 1 {
            let key = step.state.afterstate_key(step.action);
            let w = value.get_key(&key).unwrap();
            let u = w - reward_from(traj, t) + beta * lr_from(traj, pi, reference, t + 1);
            after += u * u;
        }
    }
    total / points.len() as f64 + after / traj.len() as f64
}

/// Policy objective. The out-of-segment future log-ratio sum is evaluated
/// with `frozen` (the stop-gradient surrogate) when given, else with `pi`.
#[allow(clippy::too_many_arguments)]
pub fn policy_objective(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    frozen: Option<&PolicyTable>,
    reference: &PolicyTable,
    beta: f64,
    alpha: f64,
    variant: Variant,
) -> f64 {
    let segs = segments(traj, variant);
    let future_pi = frozen.unwrap_or(pi);
    let mut total = 0.0;
    for &(s, e) in &segs {
        let own: f64 = traj.steps[s..e]
            .iter()
            .map(|st| lr(pi, reference, &st.state, st.action))
            .sum();
        let d = v(value, &traj.steps[s].state) - reward_from(traj, s)
            + beta * own
            + beta * lr_from(traj, future_pi, reference, e);
        total += d * d;
    }
    let reg: f64 = traj.steps.iter().map(|st| kl(pi, reference, &st.state)).sum::<f64>() / traj.len() as f64;
    total / segs.len() as f64 + alpha * reg
}

pub fn dpo_loss(pair: &PreferencePair, pi: &PolicyTable, reference: &PolicyTable, beta: f64) -> f64 {
    let m = beta * (lr_from(&pair.winner, pi, reference, 0) - lr_from(&pair.loser, pi, reference, 0));
    // log(1 + e^{-m}) written directly
    (1.0 + (-m).exp()).ln()
}

/// Central difference of `f` in one coordinate.
pub fn central<F: FnMut(f64) -> f64>(x0: f64, h: f64, mut f: F) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Relative error with an absolute floor: passes if either is within tolerance.
pub fn close(analytic: f64, numeric: f64, rel: f64, abs_floor: f64) -> bool {
    let d = (analytic - numeric).abs();
    d <= abs_floor || d <= rel * analytic.abs().max(numeric.abs())
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    (xs[n / 2] + xs[(n - 1) / 2]) / 2.0
}

/// Small enumerable instances of every shipped family, including
/// multi-token steps and observation-appending dynamics.
pub fn shipped_envs() -> Vec<oreo_core::envs::Env> {
    use oreo_core::envs::{DigitChain, DigitChainSpec, Env, Gridworld, GridworldSpec, Keyhole, KeyholeSpec};
    vec![
        Env::Keyhole(Keyhole::new(KeyholeSpec::default()).unwrap()),
        Env::Keyhole(
            Keyhole::new(KeyholeSpec {
                vocab: 3,
                depth: 4,
                key_position: 2,
                key_token: 2,
                step_len: 2,
                instances: 2,
                ..Default::default()
            })
            .unwrap(),
        ),
        Env::DigitChain(
            DigitChain::new(DigitChainSpec {
                instances: 5,
                ..Default::default()
            })
            .unwrap(),
        ),
        Env::DigitChain(
            DigitChain::new(DigitChainSpec {
                vocab: 3,
                depth: 2,
                step_len: 2,
                instances: 3,
                first_instance: 4,
            })
            .unwrap(),
        ),
        Env::Gridworld(Gridworld::new(GridworldSpec::default()).unwrap()),
        Env::Gridworld(
            Gridworld::new(GridworldSpec {
                width: 3,
                height: 3,
                extra_starts: vec![(0, 2)],
                goal: (2, 2),
                walls: vec![(1, 1)],
                horizon: 4,
                ..Default::default()
            })
            .unwrap(),
        ),
    ]
}

/// A deterministic non-uniform full-support reference for `mdp`.
pub fn wavy_reference<M: oreo_core::mdp::TaskMdp + ?Sized>(mdp: &M) -> PolicyTable {
    PolicyTable::from_fn(mdp, oreo_core::mdp::DEFAULT_ENUM_CAP, |s, a| {
        a.iter()
            .map(|x| (1.3 * *x as f64 + 0.7 * s.len() as f64).sin())
            .collect()
    })
    .unwrap()
}
