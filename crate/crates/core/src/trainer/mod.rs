//! Joint policy/value training on an offline dataset.

mod checkpoint;
mod iterate;
mod loss;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_HEADER};
pub use iterate::{fit, round_data_seed, run_iterations, Algorithm, IterationRound};
pub use loss::{
    afterstate_loss, loss_gradients, policy_loss, policy_loss_response, policy_loss_step, policy_loss_token,
    response_residual, stepwise_bellman_residuals, value_loss, value_loss_step, value_residuals, Gradients, Variant,
};
pub(crate) use loss::{compile, CompiledTraj};

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::inference::greedy_success_rate;
use crate::mdp::{OfflineDataset, PolicyTable, TaskMdp, ValueTable, DEFAULT_ENUM_CAP};
use crate::oracle::bellman_residual;
use crate::rng::component_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Both tables step from the same gradient evaluation.
    #[default]
    Simultaneous,
    /// Value step first, then a policy step against the updated values.
    Alternating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub alpha: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub variant: Variant,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
    /// Metrics are recorded every `log_every` steps and at the last step.
    pub log_every: usize,
    /// Also record greedy success rate in each metrics record.
    pub eval_greedy: bool,
    pub threads: usize,
    pub state_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            alpha: 0.01,
            policy_lr: 0.1,
            value_lr: 0.5,
            epochs: 100,
            batch_size: 128,
            variant: Variant::Token,
            seed: 0,
            optimizer: Optimizer::Sgd,
            schedule: Schedule::Simultaneous,
            log_every: 100,
            eval_greedy: false,
            threads: 1,
            state_cap: DEFAULT_ENUM_CAP,
        }
    }
}

impl TrainConfig {
    /// β and α as used for LLM-scale fine-tuning.
    pub fn llm_preset() -> Self {
        Self {
            beta: 0.03,
            alpha: 0.01,
            ..Self::default()
        }
    }

    /// Defaults for the DPO baseline.
    pub fn dpo_default() -> Self {
        Self {
            beta: 0.1,
            policy_lr: 0.05,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OreoError::Config(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if !(self.policy_lr >= 0.0 && self.value_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub mean_kl: f64,
    pub max_bellman_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub greedy_success: Option<f64>,
}

pub fn write_metrics<W: Write>(history: &[MetricsRecord], mut w: W) -> Result<()> {
    for m in history {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub policy: PolicyTable,
    pub value: ValueTable,
    pub history: Vec<MetricsRecord>,
}

/// Per-parameter optimizer state, laid out like the tables.
pub(crate) struct OptState {
    kind: Optimizer,
    t: i32,
    m_val: Vec<f64>,
    v_val: Vec<f64>,
    m_pol: Vec<Vec<f64>>,
    v_pol: Vec<Vec<f64>>,
}

impl OptState {
    pub(crate) fn new(kind: Optimizer, value: &ValueTable, pi: &PolicyTable) -> Self {
        let pol: Vec<Vec<f64>> = pi.iter().map(|(_, e)| vec![0.0; e.logits.len()]).collect();
        Self {
            kind,
            t: 0,
            m_val: vec![0.0; value.len()],
            v_val: vec![0.0; value.len()],
            m_pol: pol.clone(),
            v_pol: pol,
        }
    }

    pub(crate) fn tick(&mut self) {
        self.t += 1;
    }

    fn delta(kind: Optimizer, t: i32, lr: f64, g: f64, m: &mut f64, v: &mut f64) -> f64 {
        match kind {
            Optimizer::Sgd => lr * g,
            Optimizer::Adam { beta1, beta2, eps } => {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / (1.0 - beta1.powi(t));
                let vh = *v / (1.0 - beta2.powi(t));
                lr * mh / (vh.sqrt() + eps)
            }
        }
    }

    pub(crate) fn step_value(&mut self, value: &mut ValueTable, g: &[f64], lr: f64) {
        for (i, gi) in g.iter().enumerate() {
            if *gi == 0.0 && matches!(self.kind, Optimizer::Sgd) {
                continue;
            }
            let d = Self::delta(
                self.kind,
                self.t.max(1),
                lr,
                *gi,
                &mut self.m_val[i],
                &mut self.v_val[i],
            );
            *value.value_at_mut(i) -= d;
        }
    }

    pub(crate) fn step_policy(&mut self, pi: &mut PolicyTable, g: &[Vec<f64>], lr: f64) {
        for (i, gs) in g.iter().enumerate() {
            if gs.iter().all(|x| *x == 0.0) && matches!(self.kind, Optimizer::Sgd) {
                continue;
            }
            let logits = pi.logits_at_mut(i);
            for (b, gb) in gs.iter().enumerate() {
                if logits[b] == f64::NEG_INFINITY {
                    continue;
                }
                let d = Self::delta(
                    self.kind,
                    self.t.max(1),
                    lr,
                    *gb,
                    &mut self.m_pol[i][b],
                    &mut self.v_pol[i][b],
                );
                logits[b] -= d;
            }
        }
    }
}

/// Run `f` on a pool of `threads` workers, or inline when `threads <= 1`.
pub(crate) fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| OreoError::Resource(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Evaluate `f` on every item, in parallel when `parallel`, preserving order.
pub(crate) fn map_ordered<I: Sync, T: Send>(
    items: &[I],
    parallel: bool,
    f: impl Fn(&I) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    if parallel {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

/// Shuffled mini-batch schedule for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if batch_size < n {
        order.shuffle(&mut component_rng(seed, "train-shuffle", epoch as u64));
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub(crate) fn check_dataset<M: TaskMdp + ?Sized>(dataset: &OfflineDataset, mdp: &M) -> Result<()> {
    if dataset.is_empty() {
        return Err(OreoError::Contract("dataset is empty".into()));
    }
    if dataset.env_id != mdp.env_id() {
        return Err(OreoError::Contract(format!(
            "dataset is for `{}`, environment is `{}`",
            dataset.env_id,
            mdp.env_id()
        )));
    }
    Ok(())
}

/// Train from π := ref and V ≡ 0.
pub fn train<M: TaskMdp + ?Sized>(
    dataset: &OfflineDataset,
    mdp: &M,
    reference: &PolicyTable,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let value = ValueTable::zeros(mdp, config.state_cap)?;
    train_from(dataset, mdp, reference, reference.clone(), value, config)
}

/// Train starting from the given tables.
pub fn train_from<M: TaskMdp + ?Sized>(
    dataset: &OfflineDataset,
    mdp: &M,
    reference: &PolicyTable,
    mut pi: PolicyTable,
    mut value: ValueTable,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    check_dataset(dataset, mdp)?;
    let compiled: Vec<CompiledTraj> = dataset
        .trajectories
        .iter()
        .map(|t| compile(t, &value, &pi, reference))
        .collect::<Result<_>>()?;
    let n = compiled.len();
    let parallel = config.threads > 1;
    let mut opt = OptState::new(config.optimizer, &value, &pi);
    let mut history = Vec::new();
    let total = config.epochs * n.div_ceil(config.batch_size);
    let mut step = 0;

    with_threads(config.threads, || -> Result<()> {
        for epoch in 0..config.epochs {
            for batch in epoch_batches(n, config.batch_size, config.seed, epoch) {
                step += 1;
                let items: Vec<&CompiledTraj> = batch.iter().map(|&i| &compiled[i]).collect();
                let scale = 1.0 / items.len() as f64;
                let grads = |pi: &PolicyTable, value: &ValueTable| -> Result<Gradients> {
                    let parts = map_ordered(&items, parallel, |c| {
                        loss::traj_gradients(c, pi, value, config.beta, config.alpha, config.variant, scale)
                    })?;
                    let mut g = Gradients::zeros(value, pi);
                    for p in parts {
                        g.accumulate(p, scale);
                    }
                    Ok(g)
                };
                let g = grads(&pi, &value).map_err(|e| at_step(e, step))?;
                diverged(&g, step)?;
                opt.tick();
                match config.schedule {
                    Schedule::Simultaneous => {
                        opt.step_value(&mut value, &g.value, config.value_lr);
                        opt.step_policy(&mut pi, &g.policy, config.policy_lr);
                    }
                    Schedule::Alternating => {
                        opt.step_value(&mut value, &g.value, config.value_lr);
                        let g = grads(&pi, &value).map_err(|e| at_step(e, step))?;
                        diverged(&g, step)?;
                        opt.step_policy(&mut pi, &g.policy, config.policy_lr);
                    }
                }
                if step % config.log_every == 0 || step == total {
                    let m = measure(step, &compiled, mdp, reference, &pi, &value, config)?;
                    history.push(m);
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

fn at_step(e: OreoError, step: usize) -> OreoError {
    match e {
        OreoError::Numerical { state, detail } => OreoError::Training {
            step,
            detail: format!("{detail} at [{state}]"),
        },
        other => other,
    }
}

fn diverged(g: &Gradients, step: usize) -> Result<()> {
    if g.value_loss.is_finite() && g.policy_loss.is_finite() {
        Ok(())
    } else {
        Err(OreoError::Training {
            step,
            detail: format!("non-finite loss (value {}, policy {})", g.value_loss, g.policy_loss),
        })
    }
}

fn measure<M: TaskMdp + ?Sized>(
    step: usize,
    compiled: &[CompiledTraj],
    mdp: &M,
    reference: &PolicyTable,
    pi: &PolicyTable,
    value: &ValueTable,
    config: &TrainConfig,
) -> Result<MetricsRecord> {
    let n = compiled.len() as f64;
    let (mut vl, mut pl, mut kl) = (0.0, 0.0, 0.0);
    for c in compiled {
        let f = loss::forward(c, pi, true)?;
        vl += loss::value_objective(c, &f, value, config.beta, config.variant)? / n;
        pl += loss::policy_objective(c, &f, value, config.beta, config.alpha, config.variant)? / n;
        kl += f.kl.iter().sum::<f64>() / f.kl.len() as f64 / n;
    }
    let residual = bellman_residual(pi, value, mdp, reference, config.beta, config.state_cap)?;
    let greedy_success = if config.eval_greedy {
        Some(greedy_success_rate(pi, mdp)?)
    } else {
        None
    };
    let m = MetricsRecord {
        step,
        value_loss: vl,
        policy_loss: pl,
        mean_kl: kl,
        max_bellman_residual: residual,
        greedy_success,
    };
    if [m.value_loss, m.policy_loss, m.mean_kl, m.max_bellman_residual]
        .iter()
        .any(|x| !x.is_finite())
    {
        return Err(OreoError::Training {
            step,
            detail: "non-finite metrics".into(),
        });
    }
    Ok(m)
}
