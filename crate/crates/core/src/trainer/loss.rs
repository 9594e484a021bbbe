//! Soft-Bellman consistency losses and their analytic gradients.
//!
//! For a trajectory of length T with log-ratios `lr_t = log π(a_t|s_t) −
//! log π_ref(a_t|s_t)`, suffix returns `R_t` and suffix log-ratio sums `S_t`:
//!
//! ```text
//! value residual   e_t = V(s_t) − R_t + β·S_t
//! policy residual  δ_t = V(s_t) − R_t + β·lr_t + sg[β·S_{t+1}]
//! ```
//!
//! The value loss treats π as a constant; the policy losses treat V and the
//! stop-gradient bracket as constants. `L_reg` is always the token-level mean
//! KL to the reference along the trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::mdp::{fmt_tokens, log_softmax, PolicyTable, State, Trajectory, ValueTable};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Token,
    Step,
    Response,
}

impl std::str::FromStr for Variant {
    type Err = OreoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token" => Ok(Variant::Token),
            "step" => Ok(Variant::Step),
            "response" | "resp" => Ok(Variant::Response),
            other => Err(OreoError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct CompiledStep {
    pub pi: usize,
    pub pos: usize,
    pub ref_log_probs: Vec<f64>,
    pub val: Option<usize>,
    /// Value index of the pre-observation afterstate, when one exists.
    pub after: Option<usize>,
    pub reward: f64,
    pub state: String,
}

/// A trajectory resolved against table indices.
#[derive(Clone, Debug)]
pub(crate) struct CompiledTraj {
    pub steps: Vec<CompiledStep>,
    /// Step-start indices, `None` when the trajectory lacks boundaries.
    pub seg_starts: Option<Vec<usize>>,
}

pub(crate) fn compile(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
) -> Result<CompiledTraj> {
    let mut steps = Vec::with_capacity(traj.len());
    for (t, step) in traj.steps.iter().enumerate() {
        let s = &step.state;
        let pi_idx = pi
            .index_of(s.tokens())
            .ok_or_else(|| OreoError::Contract(format!("policy table has no entry for {s:?}")))?;
        let entry = pi.entry_at(pi_idx).1;
        let pos = entry
            .position(step.action)
            .ok_or_else(|| OreoError::Domain(format!("token {} not legal in {s:?}", step.action)))?;
        let ref_entry = reference.entry(s)?;
        if ref_entry.actions != entry.actions {
            return Err(OreoError::Contract(format!(
                "policy and reference action sets differ at {s:?}"
            )));
        }
        let ref_log_probs = ref_entry.log_probs();
        if ref_log_probs[pos] == f64::NEG_INFINITY {
            return Err(OreoError::UnsupportedSupport(format!(
                "reference gives zero probability to action {} at {s:?}",
                step.action
            )));
        }
        let next = traj.next_state(t);
        let after = if next.len() > s.len() + 1 {
            value.index_of(&s.afterstate_key(step.action))
        } else {
            None
        };
        steps.push(CompiledStep {
            pi: pi_idx,
            pos,
            ref_log_probs,
            val: value.index_of(s.tokens()),
            after,
            reward: step.reward,
            state: fmt_tokens(s.tokens()),
        });
    }
    let seg_starts = segment_starts(traj);
    Ok(CompiledTraj { steps, seg_starts })
}

fn segment_starts(traj: &Trajectory) -> Option<Vec<usize>> {
    if traj.is_empty() || !traj.final_state.at_boundary() {
        return None;
    }
    let starts: Vec<usize> = traj
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| s.state.at_boundary())
        .map(|(t, _)| t)
        .collect();
    (starts.first() == Some(&0)).then_some(starts)
}

/// Per-trajectory forward quantities.
pub(crate) struct Forward {
    pub lr: Vec<f64>,
    pub ret: Vec<f64>,
    /// `suffix[t] = Σ_{i≥t} lr_i`, with `suffix[T] = 0`.
    pub suffix: Vec<f64>,
    pub log_probs: Vec<Vec<f64>>,
    pub kl: Vec<f64>,
}

pub(crate) fn forward(c: &CompiledTraj, pi: &PolicyTable, need_kl: bool) -> Result<Forward> {
    let n = c.steps.len();
    let mut lr = Vec::with_capacity(n);
    let mut log_probs = Vec::with_capacity(n);
    let mut kl = Vec::with_capacity(n);
    for st in &c.steps {
        let lp = log_softmax(&pi.entry_at(st.pi).1.logits);
        lr.push(lp[st.pos] - st.ref_log_probs[st.pos]);
        if need_kl {
            let mut k = 0.0;
            for (a, b) in lp.iter().zip(&st.ref_log_probs) {
                let p = a.exp();
                if p == 0.0 {
                    continue;
                }
                if *b == f64::NEG_INFINITY {
                    return Err(OreoError::UnsupportedSupport(format!(
                        "reference support hole under policy mass at [{}]",
                        st.state
                    )));
                }
                k += p * (a - b);
            }
            kl.push(k.max(0.0));
        }
        log_probs.push(lp);
    }
    let mut ret = vec![0.0; n];
    let mut suffix = vec![0.0; n + 1];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        acc += c.steps[t].reward;
        ret[t] = acc;
        suffix[t] = lr[t] + suffix[t + 1];
    }
    Ok(Forward {
        lr,
        ret,
        suffix,
        log_probs,
        kl,
    })
}

fn value_of(c: &CompiledTraj, value: &ValueTable, t: usize) -> Result<f64> {
    let st = &c.steps[t];
    st.val
        .map(|i| value.value_at(i))
        .ok_or_else(|| OreoError::Contract(format!("value table has no entry for [{}]", st.state)))
}

fn finite(x: f64, c: &CompiledTraj, t: usize) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(OreoError::Numerical {
            state: c.steps[t].state.clone(),
            detail: format!("non-finite residual {x}"),
        })
    }
}

fn value_residual(c: &CompiledTraj, f: &Forward, value: &ValueTable, beta: f64, t: usize) -> Result<f64> {
    finite(value_of(c, value, t)? - f.ret[t] + beta * f.suffix[t], c, t)
}

fn policy_residual(
    c: &CompiledTraj,
    f: &Forward,
    value: &ValueTable,
    beta: f64,
    start: usize,
    end: usize,
) -> Result<f64> {
    // right-to-left, like the suffix sums, so a full-length segment
    // reproduces `suffix[0]` bit for bit
    let own = f.lr[start..end].iter().rev().fold(0.0, |acc, x| x + acc);
    finite(
        value_of(c, value, start)? - f.ret[start] + beta * own + beta * f.suffix[end],
        c,
        start,
    )
}

fn segments(c: &CompiledTraj, variant: Variant) -> Result<Vec<(usize, usize)>> {
    let n = c.steps.len();
    match variant {
        Variant::Token => Ok((0..n).map(|t| (t, t + 1)).collect()),
        Variant::Response => Ok(vec![(0, n)]),
        Variant::Step => {
            let starts = c
                .seg_starts
                .as_ref()
                .ok_or_else(|| OreoError::Contract("trajectory lacks step boundaries".into()))?;
            Ok(starts
                .iter()
                .enumerate()
                .map(|(k, &s)| (s, starts.get(k + 1).copied().unwrap_or(n)))
                .collect())
        }
    }
}

fn mean_kl(f: &Forward) -> f64 {
    if f.kl.is_empty() {
        0.0
    } else {
        f.kl.iter().sum::<f64>() / f.kl.len() as f64
    }
}

/// Value objective of one compiled trajectory for the given variant: the
/// per-token MSE (per-step for [`Variant::Step`]) plus the afterstate fit.
pub(crate) fn value_objective(
    c: &CompiledTraj,
    f: &Forward,
    value: &ValueTable,
    beta: f64,
    variant: Variant,
) -> Result<f64> {
    let points: Vec<usize> = match variant {
        Variant::Step => segments(c, variant)?.into_iter().map(|(s, _)| s).collect(),
        _ => (0..c.steps.len()).collect(),
    };
    let mut total = 0.0;
    for &t in &points {
        let e = value_residual(c, f, value, beta, t)?;
        total += e * e;
    }
    Ok(total / points.len() as f64 + afterstate_term(c, f, value, beta)?)
}

fn afterstate_term(c: &CompiledTraj, f: &Forward, value: &ValueTable, beta: f64) -> Result<f64> {
    let mut total = 0.0;
    for (t, st) in c.steps.iter().enumerate() {
        if let Some(i) = st.after {
            let u = finite(value.value_at(i) - f.ret[t] + beta * f.suffix[t + 1], c, t)?;
            total += u * u;
        }
    }
    Ok(total / c.steps.len() as f64)
}

pub(crate) fn policy_objective(
    c: &CompiledTraj,
    f: &Forward,
    value: &ValueTable,
    beta: f64,
    alpha: f64,
    variant: Variant,
) -> Result<f64> {
    let segs = segments(c, variant)?;
    let mut total = 0.0;
    for &(s, e) in &segs {
        let d = policy_residual(c, f, value, beta, s, e)?;
        total += d * d;
    }
    Ok(total / segs.len() as f64 + alpha * mean_kl(f))
}

/// Sparse per-trajectory gradient contribution.
pub(crate) struct TrajGrad {
    pub value: Vec<(usize, f64)>,
    pub policy: Vec<(usize, Vec<f64>)>,
    pub value_loss: f64,
    pub policy_loss: f64,
}

/// Gradients of the per-trajectory value and policy objectives, scaled by `scale`.
pub(crate) fn traj_gradients(
    c: &CompiledTraj,
    pi: &PolicyTable,
    value: &ValueTable,
    beta: f64,
    alpha: f64,
    variant: Variant,
    scale: f64,
) -> Result<TrajGrad> {
    let f = forward(c, pi, alpha > 0.0)?;
    let n = c.steps.len();
    let segs = segments(c, variant)?;
    let mut g = TrajGrad {
        value: Vec::new(),
        policy: Vec::with_capacity(n),
        value_loss: value_objective(c, &f, value, beta, variant)?,
        policy_loss: policy_objective(c, &f, value, beta, alpha, variant)?,
    };

    // value: d/dV(s_t) of mean e_t²; π is constant here
    let points: Vec<usize> = match variant {
        Variant::Step => segs.iter().map(|&(s, _)| s).collect(),
        _ => (0..n).collect(),
    };
    let w = 2.0 / points.len() as f64 * scale;
    for &t in &points {
        let e = value_residual(c, &f, value, beta, t)?;
        g.value
            .push((c.steps[t].val.expect("checked by value_residual"), w * e));
    }
    for (t, st) in c.steps.iter().enumerate() {
        if let Some(i) = st.after {
            let u = value.value_at(i) - f.ret[t] + beta * f.suffix[t + 1];
            g.value.push((i, 2.0 / n as f64 * scale * u));
        }
    }

    // policy: only the segment's own log-ratio carries gradient
    let mut coef = vec![0.0; n];
    let w = 2.0 / segs.len() as f64 * beta * scale;
    for &(s, e) in &segs {
        let d = policy_residual(c, &f, value, beta, s, e)?;
        for slot in &mut coef[s..e] {
            *slot = w * d;
        }
    }
    for (t, st) in c.steps.iter().enumerate() {
        let lp = &f.log_probs[t];
        let mut grad: Vec<f64> = lp.iter().map(|l| -coef[t] * l.exp()).collect();
        grad[st.pos] += coef[t];
        if alpha > 0.0 {
            let kl = f.kl[t];
            let a = alpha / n as f64 * scale;
            for (b, gb) in grad.iter_mut().enumerate() {
                let p = lp[b].exp();
                if p > 0.0 {
                    *gb += a * p * (lp[b] - st.ref_log_probs[b] - kl);
                }
            }
        }
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(OreoError::Numerical {
                state: st.state.clone(),
                detail: "non-finite policy gradient".into(),
            });
        }
        g.policy.push((st.pi, grad));
    }
    Ok(g)
}

/// Dense gradients aligned with table indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub value: Vec<f64>,
    pub policy: Vec<Vec<f64>>,
    /// Mean over the batch of per-trajectory value objectives.
    pub value_loss: f64,
    /// Mean over the batch of per-trajectory policy objectives.
    pub policy_loss: f64,
}

impl Gradients {
    pub(crate) fn zeros(value: &ValueTable, pi: &PolicyTable) -> Self {
        Self {
            value: vec![0.0; value.len()],
            policy: pi.iter().map(|(_, e)| vec![0.0; e.logits.len()]).collect(),
            value_loss: 0.0,
            policy_loss: 0.0,
        }
    }

    pub(crate) fn accumulate(&mut self, g: TrajGrad, scale: f64) {
        for (i, x) in g.value {
            self.value[i] += x;
        }
        for (i, v) in g.policy {
            for (dst, x) in self.policy[i].iter_mut().zip(v) {
                *dst += x;
            }
        }
        self.value_loss += g.value_loss * scale;
        self.policy_loss += g.policy_loss * scale;
    }

    pub fn is_zero(&self) -> bool {
        self.value.iter().all(|x| *x == 0.0) && self.policy.iter().flatten().all(|x| *x == 0.0)
    }
}

fn with_forward<T>(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    need_kl: bool,
    body: impl FnOnce(&CompiledTraj, &Forward) -> Result<T>,
) -> Result<T> {
    if traj.is_empty() {
        return Err(OreoError::Contract("empty trajectory".into()));
    }
    let c = compile(traj, value, pi, reference)?;
    let f = forward(&c, pi, need_kl)?;
    body(&c, &f)
}

/// Per-token value residuals `e_t`.
pub fn value_residuals(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
) -> Result<Vec<f64>> {
    with_forward(traj, value, pi, reference, false, |c, f| {
        (0..c.steps.len())
            .map(|t| value_residual(c, f, value, beta, t))
            .collect()
    })
}

/// (1/T)·Σ_t (V(s_t) − R_t + β·Σ_{i≥t} lr_i)².
pub fn value_loss(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
) -> Result<f64> {
    let e = value_residuals(traj, value, pi, reference, beta)?;
    Ok(e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64)
}

/// Value MSE restricted to step-start states.
pub fn value_loss_step(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
) -> Result<f64> {
    with_forward(traj, value, pi, reference, false, |c, f| {
        let segs = segments(c, Variant::Step)?;
        let mut total = 0.0;
        for &(s, _) in &segs {
            let e = value_residual(c, f, value, beta, s)?;
            total += e * e;
        }
        Ok(total / segs.len() as f64)
    })
}

/// Fit of pre-observation afterstate values to `R_t − β·Σ_{i>t} lr_i`,
/// averaged over all T steps. Zero for MDPs without observations.
pub fn afterstate_loss(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
) -> Result<f64> {
    with_forward(traj, value, pi, reference, false, |c, f| {
        afterstate_term(c, f, value, beta)
    })
}

fn policy_loss_variant(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    alpha: f64,
    variant: Variant,
) -> Result<f64> {
    with_forward(traj, value, pi, reference, alpha > 0.0, |c, f| {
        policy_objective(c, f, value, beta, alpha, variant)
    })
}

/// Token-level policy loss with stop-gradient on future log-ratios plus α·L_reg.
pub fn policy_loss_token(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    alpha: f64,
) -> Result<f64> {
    policy_loss_variant(traj, value, pi, reference, beta, alpha, Variant::Token)
}

/// Step-level policy loss: one residual per reasoning step, with the step's
/// log-probability the sum of its token log-probabilities.
pub fn policy_loss_step(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    alpha: f64,
) -> Result<f64> {
    policy_loss_variant(traj, value, pi, reference, beta, alpha, Variant::Step)
}

/// Response-level policy loss: a single residual at s_0, no stop-gradient.
pub fn policy_loss_response(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    alpha: f64,
) -> Result<f64> {
    policy_loss_variant(traj, value, pi, reference, beta, alpha, Variant::Response)
}

pub fn policy_loss(
    variant: Variant,
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    alpha: f64,
) -> Result<f64> {
    policy_loss_variant(traj, value, pi, reference, beta, alpha, variant)
}

/// The pre-square scalar of the response-level policy loss.
pub fn response_residual(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
) -> Result<f64> {
    with_forward(traj, value, pi, reference, false, |c, f| {
        policy_residual(c, f, value, beta, 0, c.steps.len())
    })
}

/// Per-transition soft-Bellman residuals
/// `V(s_t) − V(s_{t+1}) − r_t + β·lr_t` along a trajectory.
pub fn stepwise_bellman_residuals(
    traj: &Trajectory,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(traj.len());
    for (t, step) in traj.steps.iter().enumerate() {
        let next: &State = traj.next_state(t);
        let lr = crate::mdp::log_ratio(pi, reference, &step.state, step.action)?;
        out.push(value.get(&step.state)? - value.get(next)? - step.reward + beta * lr);
    }
    Ok(out)
}

/// Gradients of the mean (over the batch) value and policy objectives.
pub fn loss_gradients(
    batch: &[Trajectory],
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
    alpha: f64,
    variant: Variant,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(OreoError::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut out = Gradients::zeros(value, pi);
    for traj in batch {
        if traj.is_empty() {
            return Err(OreoError::Contract("empty trajectory".into()));
        }
        let c = compile(traj, value, pi, reference)?;
        out.accumulate(traj_gradients(&c, pi, value, beta, alpha, variant, scale)?, scale);
    }
    Ok(out)
}
