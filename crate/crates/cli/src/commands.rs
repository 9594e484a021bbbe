use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use oreo_core::baselines::{dpo_train, read_pairs_jsonl};
use oreo_core::envs::{generate_offline_dataset, Env};
use oreo_core::inference::evaluate;
use oreo_core::mdp::{fmt_tokens, OfflineDataset, PolicyTable, TaskMdp, ValueTable};
use oreo_core::oracle::{bellman_residual, soft_backward_induction};
use oreo_core::trainer::{
    fit, read_checkpoint, run_iterations, write_checkpoint, write_metrics, Algorithm, Checkpoint, TrainedModel,
};
use oreo_core::OreoError;
use serde::Serialize;

use crate::config::RunConfig;

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> anyhow::Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Ok(read_checkpoint(open(path)?)?)
}

fn save_checkpoint(path: &Path, policy: &PolicyTable, value: &ValueTable) -> anyhow::Result<()> {
    let mut w = create(path)?;
    write_checkpoint(policy, value, &mut w)?;
    w.flush()?;
    Ok(())
}

fn build_env(cfg: &RunConfig) -> anyhow::Result<Env> {
    cfg.train.validate()?;
    Ok(cfg.env()?.build()?)
}

fn reference(cfg: &RunConfig, env: &Env) -> anyhow::Result<PolicyTable> {
    match &cfg.data.reference {
        Some(p) => Ok(load_checkpoint(p)?.policy),
        None => Ok(PolicyTable::uniform(env, cfg.train.state_cap)?),
    }
}

fn dataset_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.data
        .path
        .clone()
        .unwrap_or_else(|| out.join("data").join("dataset.jsonl"))
}

fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    cfg.eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("ckpt").join("model.ckpt"))
}

pub fn oracle(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let env = build_env(cfg)?;
    let reference = reference(cfg, &env)?;
    let beta = cfg.train.beta;
    let o = soft_backward_induction(&env, &reference, beta, cfg.train.state_cap)?;
    for s0 in env.initial_states() {
        println!("V*(s0) [{}] = {}", fmt_tokens(s0.tokens()), o.v0(&s0));
    }
    let res = bellman_residual(&o.pi_star, &o.v_star, &env, &reference, beta, cfg.train.state_cap)?;
    println!("max_bellman_residual = {res:e}");
    let path = out.join("ckpt").join("oracle.ckpt");
    save_checkpoint(&path, &o.pi_star, &o.v_star)?;
    println!("checkpoint: {}", path.display());
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let env = build_env(cfg)?;
    let behavior = match cfg.data.behavior.as_str() {
        "ref" => reference(cfg, &env)?,
        path => load_checkpoint(Path::new(path))?.policy,
    };
    let ds = generate_offline_dataset(&env, &behavior, cfg.data.n_per_task, cfg.train.seed)?;
    let path = dataset_path(cfg, out);
    let mut w = create(&path)?;
    ds.write_jsonl(&mut w)?;
    w.flush()?;
    println!(
        "trajectories = {}  positive_fraction = {:.4}  -> {}",
        ds.len(),
        ds.positive_fraction(),
        path.display()
    );
    Ok(())
}

fn read_dataset(cfg: &RunConfig, out: &Path, env: &Env) -> anyhow::Result<OfflineDataset> {
    let path = dataset_path(cfg, out);
    let ds = OfflineDataset::read_jsonl(open(&path)?, env)?;
    Ok(ds)
}

fn write_run_metrics(out: &Path, model: &TrainedModel) -> anyhow::Result<()> {
    let mut w = create(&out.join("metrics.jsonl"))?;
    write_metrics(&model.history, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let env = build_env(cfg)?;
    let reference = reference(cfg, &env)?;
    let ds = read_dataset(cfg, out, &env)?;
    let algo = cfg.algo();
    let model = match (&cfg.data.pairs, algo) {
        (Some(p), Algorithm::Dpo) => {
            let pairs = read_pairs_jsonl(open(p)?, &env)?;
            dpo_train(&pairs, &env, &reference, &cfg.train)?
        }
        _ => {
            let value = ValueTable::zeros(&env, cfg.train.state_cap)?;
            fit(
                algo,
                &ds,
                &env,
                &reference,
                reference.clone(),
                value,
                &cfg.train,
                cfg.data.pair_cap,
            )?
        }
    };
    let ckpt = out.join("ckpt").join("model.ckpt");
    save_checkpoint(&ckpt, &model.policy, &model.value)?;
    write_run_metrics(out, &model)?;
    if let Some(m) = model.history.last() {
        println!(
            "step {}  value_loss = {:e}  policy_loss = {:e}  mean_kl = {:e}  max_bellman_residual = {:e}",
            m.step, m.value_loss, m.policy_loss, m.mean_kl, m.max_bellman_residual
        );
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let env = build_env(cfg)?;
    let mode = cfg.eval_mode()?;
    let ck = load_checkpoint(&checkpoint_path(cfg, out))?;
    let report = evaluate(&ck.policy, &ck.value, &env, mode, cfg.eval.episodes, cfg.train.seed)?;
    fs::create_dir_all(out)?;
    let path = out.join("report.jsonl");
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("appending to {}", path.display()))?;
    report.append_jsonl(f)?;
    println!(
        "{mode}  episodes = {}  success_rate = {:.4}  mean_reward = {:.4}  mean_length = {:.2}",
        report.episodes, report.success_rate, report.mean_reward, report.mean_length
    );
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    round: usize,
    algo: Algorithm,
    trajectories: usize,
    positive_fraction: f64,
    greedy_success: f64,
}

#[derive(Serialize)]
struct RoundMetrics<'a> {
    round: usize,
    #[serde(flatten)]
    record: &'a oreo_core::trainer::MetricsRecord,
}

pub fn iterate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let env = build_env(cfg)?;
    let reference = reference(cfg, &env)?;
    let rounds = cfg.rounds.unwrap_or(3);
    let algo = cfg.algo();
    let results = run_iterations(
        &env,
        &reference,
        &cfg.train,
        algo,
        rounds,
        cfg.data.n_per_task,
        cfg.data.pair_cap,
    )?;

    let mut metrics = create(&out.join("metrics.jsonl"))?;
    let mut summary = create(&out.join("summary.jsonl"))?;
    println!("round  trajectories  positive_fraction  greedy_success");
    for r in &results {
        let mut w = create(&out.join("data").join(format!("round-{}.jsonl", r.round)))?;
        r.dataset.write_jsonl(&mut w)?;
        w.flush()?;
        save_checkpoint(
            &out.join("ckpt").join(format!("round-{}.ckpt", r.round)),
            &r.model.policy,
            &r.model.value,
        )?;
        for record in &r.model.history {
            serde_json::to_writer(&mut metrics, &RoundMetrics { round: r.round, record }).map_err(OreoError::from)?;
            metrics.write_all(b"\n")?;
        }
        let row = SummaryRow {
            round: r.round,
            algo,
            trajectories: r.dataset.len(),
            positive_fraction: r.dataset.positive_fraction(),
            greedy_success: r.greedy_success,
        };
        serde_json::to_writer(&mut summary, &row).map_err(OreoError::from)?;
        summary.write_all(b"\n")?;
        println!(
            "{:>5}  {:>12}  {:>17.4}  {:>14.4}",
            row.round, row.trajectories, row.positive_fraction, row.greedy_success
        );
    }
    metrics.flush()?;
    summary.flush()?;
    Ok(())
}

pub fn residual(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let env = build_env(cfg)?;
    let reference = reference(cfg, &env)?;
    let ck = load_checkpoint(&checkpoint_path(cfg, out))?;
    let res = bellman_residual(
        &ck.policy,
        &ck.value,
        &env,
        &reference,
        cfg.train.beta,
        cfg.train.state_cap,
    )?;
    println!("max_bellman_residual = {res:e}");
    Ok(())
}
