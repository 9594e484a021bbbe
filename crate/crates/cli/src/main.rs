//! `oreo`: oracle computation, data generation, training, evaluation and
//! iterative runs on synthetic token MDPs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use oreo_core::trainer::{Algorithm, Optimizer, Variant};
use oreo_core::OreoError;

use config::{env_family, same_family, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "oreo",
    version,
    about = "Offline soft-Bellman policy/value training on synthetic MDPs"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML run config; flags override its values.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output root (overrides ORE0_OUT and the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Environment family with default parameters, unless the config already
    /// describes one of the same family.
    #[arg(long, global = true)]
    env: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    state_cap: Option<usize>,
    /// Reference policy checkpoint; uniform when absent.
    #[arg(long, global = true)]
    reference: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    #[arg(long)]
    algo: Option<Algorithm>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    policy_lr: Option<f64>,
    #[arg(long)]
    value_lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// sgd or adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Record greedy success in the metrics.
    #[arg(long)]
    eval_greedy: bool,
    /// Pairs per task when DPO builds its own pairs.
    #[arg(long)]
    pair_cap: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact π*/V* by backward induction; prints V*(s0) per task and the residual.
    Oracle,
    /// Sample an offline dataset from a behavior policy.
    GenData {
        /// `ref` or a checkpoint path.
        #[arg(long)]
        behavior: Option<String>,
        #[arg(long)]
        n_per_task: Option<usize>,
        /// Dataset file (default `<out>/data/dataset.jsonl`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a policy (and value table for OREO) on a dataset.
    Train {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Preference pairs JSONL for DPO.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; appends a report line to `<out>/report.jsonl`.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// greedy, sample, beam:B or bok:K
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Alternate data collection and training for several rounds.
    Iterate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        n_per_task: Option<usize>,
    },
    /// Max soft-Bellman residual of a checkpoint.
    Residual {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn apply_globals(cfg: &mut RunConfig, g: &GlobalArgs) -> anyhow::Result<()> {
    if let Some(name) = &g.env {
        let spec = env_family(name)?;
        if !cfg.env.as_ref().is_some_and(|e| same_family(e, &spec)) {
            cfg.env = Some(spec);
        }
    }
    if let Some(s) = g.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.train.threads = t;
    }
    if let Some(b) = g.beta {
        cfg.train.beta = b;
    }
    if let Some(c) = g.state_cap {
        cfg.train.state_cap = c;
    }
    if let Some(r) = &g.reference {
        cfg.data.reference = Some(r.clone());
    }
    Ok(())
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) -> anyhow::Result<()> {
    let t = &mut cfg.train;
    if let Some(x) = a.algo {
        cfg.algo = Some(x);
    }
    if let Some(x) = a.variant {
        t.variant = x;
    }
    if let Some(x) = a.alpha {
        t.alpha = x;
    }
    if let Some(x) = a.policy_lr {
        t.policy_lr = x;
    }
    if let Some(x) = a.value_lr {
        t.value_lr = x;
    }
    if let Some(x) = a.epochs {
        t.epochs = x;
    }
    if let Some(x) = a.batch_size {
        t.batch_size = x;
    }
    if let Some(x) = a.log_every {
        t.log_every = x;
    }
    if a.eval_greedy {
        t.eval_greedy = true;
    }
    match a.optimizer.as_deref() {
        None => {}
        Some("sgd") => t.optimizer = Optimizer::Sgd,
        Some("adam") => t.optimizer = Optimizer::adam(),
        Some(other) => return Err(OreoError::Config(format!("unknown optimizer `{other}`")).into()),
    }
    if let Some(x) = a.pair_cap {
        cfg.data.pair_cap = x;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_globals(&mut cfg, &cli.global)?;
    let out = cfg.out_dir(cli.global.out.as_deref());
    match cli.command {
        Command::Oracle => commands::oracle(&cfg, &out),
        Command::GenData {
            behavior,
            n_per_task,
            output,
        } => {
            if let Some(b) = behavior {
                cfg.data.behavior = b;
            }
            if let Some(n) = n_per_task {
                cfg.data.n_per_task = n;
            }
            if output.is_some() {
                cfg.data.path = output;
            }
            commands::gen_data(&cfg, &out)
        }
        Command::Train { train, data, pairs } => {
            apply_train(&mut cfg, &train)?;
            if data.is_some() {
                cfg.data.path = data;
            }
            if pairs.is_some() {
                cfg.data.pairs = pairs;
            }
            commands::train(&cfg, &out)
        }
        Command::Eval { ckpt, mode, episodes } => {
            if ckpt.is_some() {
                cfg.eval.checkpoint = ckpt;
            }
            if let Some(m) = mode {
                cfg.eval.mode = m;
            }
            if let Some(e) = episodes {
                cfg.eval.episodes = e;
            }
            commands::eval(&cfg, &out)
        }
        Command::Iterate {
            train,
            rounds,
            n_per_task,
        } => {
            apply_train(&mut cfg, &train)?;
            if rounds.is_some() {
                cfg.rounds = rounds;
            }
            if let Some(n) = n_per_task {
                cfg.data.n_per_task = n;
            }
            commands::iterate(&cfg, &out)
        }
        Command::Residual { ckpt } => {
            if ckpt.is_some() {
                cfg.eval.checkpoint = ckpt;
            }
            commands::residual(&cfg, &out)
        }
    }
}

fn error_code(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<OreoError>() {
        return e.code();
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    "internal"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("oreo-error: usage");
            let _ = e.print();
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("oreo-error: {}", error_code(&e));
            eprintln!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
