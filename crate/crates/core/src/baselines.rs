//! Comparison methods: supervised fine-tuning, rejection sampling and DPO.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::inference::{greedy_success_rate, is_success};
use crate::mdp::{
    kl_from_logits, log_ratio, OfflineDataset, PolicyTable, TaskMdp, TokenId, Trajectory, TrajectoryRecord, ValueTable,
};
use crate::oracle::bellman_residual;
use crate::trainer::{
    check_dataset, compile, epoch_batches, map_ordered, with_threads, CompiledTraj, MetricsRecord, OptState,
    TrainConfig, TrainedModel,
};

/// Default per-task cap on preference pairs.
pub const DEFAULT_PAIR_CAP: usize = 6;

/// −(1/T)·Σ_t log π(a_t|s_t).
pub fn sft_loss(traj: &Trajectory, pi: &PolicyTable) -> Result<f64> {
    if traj.is_empty() {
        return Err(OreoError::Contract("empty trajectory".into()));
    }
    let mut total = 0.0;
    for step in &traj.steps {
        total -= pi.log_prob(&step.state, step.action)?;
    }
    Ok(total / traj.len() as f64)
}

/// Per-state logit gradient of one trajectory's SFT loss, scaled by `scale`.
fn sft_traj_grad(c: &CompiledTraj, pi: &PolicyTable, scale: f64) -> Vec<(usize, Vec<f64>)> {
    let w = scale / c.steps.len() as f64;
    c.steps
        .iter()
        .map(|st| {
            let mut g: Vec<f64> = pi.entry_at(st.pi).1.probs().iter().map(|p| w * p).collect();
            g[st.pos] -= w;
            (st.pi, g)
        })
        .collect()
}

/// Mean SFT loss over the batch and its logit gradient, aligned with `pi`.
pub fn sft_loss_gradients(batch: &[Trajectory], pi: &PolicyTable) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(OreoError::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let dummy = ValueTable::new();
    let mut grad = zeros_like(pi);
    let mut loss = 0.0;
    for traj in batch {
        let c = compile(traj, &dummy, pi, pi)?;
        loss += sft_loss(traj, pi)? * scale;
        add_sparse(&mut grad, sft_traj_grad(&c, pi, scale));
    }
    Ok((loss, grad))
}

fn zeros_like(pi: &PolicyTable) -> Vec<Vec<f64>> {
    pi.iter().map(|(_, e)| vec![0.0; e.logits.len()]).collect()
}

fn add_sparse(dst: &mut [Vec<f64>], parts: Vec<(usize, Vec<f64>)>) {
    for (i, g) in parts {
        for (d, x) in dst[i].iter_mut().zip(g) {
            *d += x;
        }
    }
}

/// Shared policy-only gradient loop. `loss_grad(item, pi, scale)` returns the
/// item's loss and sparse logit gradient already multiplied by `scale`.
fn policy_descent<M, I, F>(
    items: &[I],
    mdp: &M,
    reference: &PolicyTable,
    mut pi: PolicyTable,
    config: &TrainConfig,
    loss_grad: F,
) -> Result<TrainedModel>
where
    M: TaskMdp + ?Sized,
    I: Sync,
    F: Fn(&I, &PolicyTable, f64) -> Result<(f64, Vec<(usize, Vec<f64>)>)> + Sync + Send,
{
    config.validate()?;
    let value = ValueTable::zeros(mdp, config.state_cap)?;
    let mut opt = OptState::new(config.optimizer, &value, &pi);
    let n = items.len();
    let total = config.epochs * n.div_ceil(config.batch_size);
    let parallel = config.threads > 1;
    let mut history = Vec::new();
    let mut step = 0;
    with_threads(config.threads, || -> Result<()> {
        for epoch in 0..config.epochs {
            for batch in epoch_batches(n, config.batch_size, config.seed, epoch) {
                step += 1;
                let scale = 1.0 / batch.len() as f64;
                let parts = map_ordered(&batch, parallel, |&i| loss_grad(&items[i], &pi, scale))?;
                let mut grad = zeros_like(&pi);
                let mut loss = 0.0;
                for (l, g) in parts {
                    loss += l * scale;
                    add_sparse(&mut grad, g);
                }
                if !loss.is_finite() || grad.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(OreoError::Training {
                        step,
                        detail: format!("non-finite loss {loss}"),
                    });
                }
                opt.tick();
                opt.step_policy(&mut pi, &grad, config.policy_lr);
                if step % config.log_every == 0 || step == total {
                    let mut full = 0.0;
                    for it in items {
                        full += loss_grad(it, &pi, 1.0)?.0 / n as f64;
                    }
                    history.push(MetricsRecord {
                        step,
                        value_loss: 0.0,
                        policy_loss: full,
                        mean_kl: mean_kl_over_states(&pi, reference)?,
                        max_bellman_residual: bellman_residual(
                            &pi,
                            &value,
                            mdp,
                            reference,
                            config.beta,
                            config.state_cap,
                        )?,
                        greedy_success: if config.eval_greedy {
                            Some(greedy_success_rate(&pi, mdp)?)
                        } else {
                            None
                        },
                    });
                }
            }
        }
        Ok(())
    })??;
    Ok(TrainedModel {
        policy: pi,
        value,
        history,
    })
}

/// Mean KL to the reference over every policy state.
fn mean_kl_over_states(pi: &PolicyTable, reference: &PolicyTable) -> Result<f64> {
    let mut total = 0.0;
    for (k, e) in pi.iter() {
        let r = reference
            .get(k)
            .ok_or_else(|| OreoError::Contract("reference misses a policy state".into()))?;
        total += kl_from_logits(&e.logits, &r.logits)
            .map_err(|_| OreoError::UnsupportedSupport("reference support hole under policy mass".into()))?;
    }
    Ok(total / pi.len().max(1) as f64)
}

/// SFT on every trajectory of the dataset, starting from `init`.
pub fn sft_train_from<M: TaskMdp + ?Sized>(
    dataset: &OfflineDataset,
    mdp: &M,
    reference: &PolicyTable,
    init: PolicyTable,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    check_dataset(dataset, mdp)?;
    let dummy = ValueTable::new();
    let compiled: Vec<CompiledTraj> = dataset
        .trajectories
        .iter()
        .map(|t| compile(t, &dummy, &init, reference))
        .collect::<Result<_>>()?;
    policy_descent(&compiled, mdp, reference, init, config, |c, pi, scale| {
        let mut loss = 0.0;
        for st in &c.steps {
            loss -= crate::mdp::log_softmax(&pi.entry_at(st.pi).1.logits)[st.pos];
        }
        Ok((loss / c.steps.len() as f64, sft_traj_grad(c, pi, scale)))
    })
}

pub fn sft_train<M: TaskMdp + ?Sized>(
    dataset: &OfflineDataset,
    mdp: &M,
    reference: &PolicyTable,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    sft_train_from(dataset, mdp, reference, reference.clone(), config)
}

/// SFT restricted to successful trajectories, starting from `init`.
pub fn rejection_sampling_train_from<M: TaskMdp + ?Sized>(
    dataset: &OfflineDataset,
    mdp: &M,
    reference: &PolicyTable,
    init: PolicyTable,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let positives = dataset.filter(is_success);
    if positives.is_empty() {
        return Err(OreoError::Training {
            step: 0,
            detail: "dataset has no successful trajectories".into(),
        });
    }
    sft_train_from(&positives, mdp, reference, init, config)
}

pub fn rejection_sampling_train<M: TaskMdp + ?Sized>(
    dataset: &OfflineDataset,
    mdp: &M,
    reference: &PolicyTable,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    rejection_sampling_train_from(dataset, mdp, reference, reference.clone(), config)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    /// Prompt tokens of the shared task instance.
    pub task: Vec<TokenId>,
    pub winner: Trajectory,
    pub loser: Trajectory,
}

/// Per task (in first-appearance order), up to `max_pairs_per_task` distinct
/// winner/loser pairs drawn uniformly without replacement from the
/// successful × unsuccessful cross product.
pub fn make_preference_pairs<R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    max_pairs_per_task: usize,
    rng: &mut R,
) -> Vec<PreferencePair> {
    let mut out = Vec::new();
    for (task, idxs) in dataset.groups() {
        let (pos, neg): (Vec<usize>, Vec<usize>) =
            idxs.into_iter().partition(|&i| is_success(&dataset.trajectories[i]));
        let cross = pos.len() * neg.len();
        let take = cross.min(max_pairs_per_task);
        if take == 0 {
            continue;
        }
        for k in rand::seq::index::sample(rng, cross, take) {
            let (w, l) = (pos[k / neg.len()], neg[k % neg.len()]);
            out.push(PreferencePair {
                task: task.clone(),
                winner: dataset.trajectories[w].clone(),
                loser: dataset.trajectories[l].clone(),
            });
        }
    }
    out
}

/// Stable `−log σ(x)`.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Stable `σ(x)`.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bradley-Terry probability that the first response is preferred.
pub fn bt_probability(reward_w: f64, reward_l: f64) -> f64 {
    sigmoid(reward_w - reward_l)
}

fn summed_log_ratio(traj: &Trajectory, pi: &PolicyTable, reference: &PolicyTable) -> Result<f64> {
    let mut total = 0.0;
    for step in &traj.steps {
        total += log_ratio(pi, reference, &step.state, step.action)?;
    }
    Ok(total)
}

/// β·(Σ winner log-ratios − Σ loser log-ratios).
pub fn dpo_margin(pair: &PreferencePair, pi: &PolicyTable, reference: &PolicyTable, beta: f64) -> Result<f64> {
    Ok(beta * (summed_log_ratio(&pair.winner, pi, reference)? - summed_log_ratio(&pair.loser, pi, reference)?))
}

/// `−log σ(margin)`.
pub fn dpo_loss(pair: &PreferencePair, pi: &PolicyTable, reference: &PolicyTable, beta: f64) -> Result<f64> {
    Ok(neg_log_sigmoid(dpo_margin(pair, pi, reference, beta)?))
}

struct CompiledPair {
    winner: CompiledTraj,
    loser: CompiledTraj,
}

fn pair_loss_grad(p: &CompiledPair, pi: &PolicyTable, beta: f64, scale: f64) -> (f64, Vec<(usize, Vec<f64>)>) {
    let lr_sum = |c: &CompiledTraj| -> f64 {
        c.steps
            .iter()
            .map(|st| crate::mdp::log_softmax(&pi.entry_at(st.pi).1.logits)[st.pos] - st.ref_log_probs[st.pos])
            .sum()
    };
    let m = beta * (lr_sum(&p.winner) - lr_sum(&p.loser));
    // dL/dm = −σ(−m)
    let dm = -sigmoid(-m) * scale;
    let mut out = Vec::new();
    for (c, sign) in [(&p.winner, 1.0), (&p.loser, -1.0)] {
        for st in &c.steps {
            let w = dm * sign * beta;
            let mut g: Vec<f64> = pi.entry_at(st.pi).1.probs().iter().map(|q| -w * q).collect();
            g[st.pos] += w;
            out.push((st.pi, g));
        }
    }
    (neg_log_sigmoid(m), out)
}

fn compile_pairs(pairs: &[PreferencePair], pi: &PolicyTable, reference: &PolicyTable) -> Result<Vec<CompiledPair>> {
    let dummy = ValueTable::new();
    pairs
        .iter()
        .map(|p| {
            Ok(CompiledPair {
                winner: compile(&p.winner, &dummy, pi, reference)?,
                loser: compile(&p.loser, &dummy, pi, reference)?,
            })
        })
        .collect()
}

/// Mean DPO loss over `pairs` and its logit gradient, aligned with `pi`.
pub fn dpo_loss_gradients(
    pairs: &[PreferencePair],
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if pairs.is_empty() {
        return Err(OreoError::Contract("no preference pairs".into()));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut grad = zeros_like(pi);
    let mut loss = 0.0;
    for p in compile_pairs(pairs, pi, reference)? {
        let (l, g) = pair_loss_grad(&p, pi, beta, scale);
        loss += l * scale;
        add_sparse(&mut grad, g);
    }
    Ok((loss, grad))
}

/// Gradient descent on the mean DPO loss from `init`.
pub fn dpo_train_from<M: TaskMdp + ?Sized>(
    pairs: &[PreferencePair],
    mdp: &M,
    reference: &PolicyTable,
    init: PolicyTable,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    if pairs.is_empty() {
        return Err(OreoError::Contract("no preference pairs".into()));
    }
    let compiled = compile_pairs(pairs, &init, reference)?;
    let beta = config.beta;
    policy_descent(&compiled, mdp, reference, init, config, move |p, pi, scale| {
        Ok(pair_loss_grad(p, pi, beta, scale))
    })
}

pub fn dpo_train<M: TaskMdp + ?Sized>(
    pairs: &[PreferencePair],
    mdp: &M,
    reference: &PolicyTable,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    dpo_train_from(pairs, mdp, reference, reference.clone(), config)
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    task: Vec<TokenId>,
    winner: TrajectoryRecord,
    loser: TrajectoryRecord,
}

pub fn write_pairs_jsonl<W: Write>(env_id: &str, pairs: &[PreferencePair], mut w: W) -> Result<()> {
    for p in pairs {
        let rec = PairRecord {
            task: p.task.clone(),
            winner: TrajectoryRecord::from_trajectory(env_id, &p.winner),
            loser: TrajectoryRecord::from_trajectory(env_id, &p.loser),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pairs_jsonl<R: BufRead, M: TaskMdp + ?Sized>(r: R, mdp: &M) -> Result<Vec<PreferencePair>> {
    let starts = mdp.initial_states();
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord =
            serde_json::from_str(&line).map_err(|e| OreoError::Parse(format!("pairs line {}: {e}", n + 1)))?;
        let s0 = starts
            .iter()
            .find(|s| s.tokens() == rec.task.as_slice())
            .ok_or_else(|| OreoError::Parse(format!("pairs line {}: unknown task", n + 1)))?;
        let winner = rec.winner.to_trajectory(mdp, s0)?;
        let loser = rec.loser.to_trajectory(mdp, s0)?;
        if winner.total_reward() <= loser.total_reward() {
            return Err(OreoError::Parse(format!(
                "pairs line {}: winner does not outscore loser",
                n + 1
            )));
        }
        out.push(PreferencePair {
            task: rec.task,
            winner,
            loser,
        });
    }
    Ok(out)
}
