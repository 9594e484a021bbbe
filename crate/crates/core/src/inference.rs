//! Decoding, value-guided search and evaluation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OreoError, Result};
use crate::mdp::{log_ratio, rollout, PolicyTable, State, Step, TaskMdp, TokenId, Trajectory, ValueTable};
use crate::rng::{argmax, component_rng, sample_index};

/// Step spaces up to this size are enumerated for proposal sampling.
pub const PROPOSAL_ENUM_CAP: usize = 4096;

/// An episode counts as a success when its total reward is positive.
pub fn is_success(traj: &Trajectory) -> bool {
    traj.total_reward() > 0.0
}

fn policy_probs(pi: &PolicyTable, s: &State, actions: &[TokenId]) -> Result<Vec<f64>> {
    let entry = pi.entry(s)?;
    if entry.actions != actions {
        return Err(OreoError::Contract(format!(
            "policy action set differs from legal actions at {s:?}"
        )));
    }
    Ok(entry.probs())
}

/// Highest-probability action at every state; ties go to the lowest action id.
pub fn greedy_decode<M: TaskMdp + ?Sized>(pi: &PolicyTable, mdp: &M, s0: &State) -> Result<Trajectory> {
    rollout(mdp, s0, |s, actions| Ok(argmax(&policy_probs(pi, s, actions)?)))
}

/// Fraction of task instances solved by greedy decoding.
pub fn greedy_success_rate<M: TaskMdp + ?Sized>(pi: &PolicyTable, mdp: &M) -> Result<f64> {
    let starts = mdp.initial_states();
    let mut wins = 0;
    for s0 in &starts {
        if is_success(&greedy_decode(pi, mdp, s0)?) {
            wins += 1;
        }
    }
    Ok(wins as f64 / starts.len() as f64)
}

#[derive(Clone, Debug)]
pub struct BeamCandidate {
    pub steps: Vec<Step>,
    pub state: State,
    pub reward: f64,
    pub score: f64,
}

impl BeamCandidate {
    pub fn finished(&self) -> bool {
        self.state.is_terminal()
    }

    pub fn into_trajectory(self) -> Trajectory {
        Trajectory {
            steps: self.steps,
            final_state: self.state,
        }
    }
}

/// One reasoning step: the tokens from `s` up to the next boundary or terminal.
#[derive(Clone, Debug)]
struct StepOption {
    steps: Vec<Step>,
    end: State,
    prob: f64,
}

fn extend_token<M: TaskMdp + ?Sized>(mdp: &M, s: &State, a: TokenId) -> Result<(Step, State)> {
    let reward = mdp.reward(s, a)?;
    let next = mdp.transition(s, a)?;
    Ok((
        Step {
            state: s.clone(),
            action: a,
            reward,
        },
        next,
    ))
}

fn enumerate_step_options<M: TaskMdp + ?Sized>(
    pi: &PolicyTable,
    mdp: &M,
    s: &State,
    cap: usize,
) -> Result<Option<Vec<StepOption>>> {
    let mut done = Vec::new();
    let mut frontier = vec![StepOption {
        steps: Vec::new(),
        end: s.clone(),
        prob: 1.0,
    }];
    while let Some(opt) = frontier.pop() {
        if !opt.steps.is_empty() && (opt.end.is_terminal() || opt.end.at_boundary()) {
            done.push(opt);
            if done.len() > cap {
                return Ok(None);
            }
            continue;
        }
        let actions = mdp.legal_actions(&opt.end);
        let probs = policy_probs(pi, &opt.end, &actions)?;
        // reversed so the stack pops in ascending action order
        for (&a, &p) in actions.iter().zip(&probs).rev() {
            let (step, next) = extend_token(mdp, &opt.end, a)?;
            let mut steps = opt.steps.clone();
            steps.push(step);
            frontier.push(StepOption {
                steps,
                end: next,
                prob: opt.prob * p,
            });
        }
        if frontier.len() + done.len() > cap * 4 {
            return Ok(None);
        }
    }
    Ok(Some(done))
}

fn sample_step<M: TaskMdp + ?Sized, R: Rng + ?Sized>(
    pi: &PolicyTable,
    mdp: &M,
    s: &State,
    rng: &mut R,
) -> Result<StepOption> {
    let mut opt = StepOption {
        steps: Vec::new(),
        end: s.clone(),
        prob: 1.0,
    };
    loop {
        let actions = mdp.legal_actions(&opt.end);
        let probs = policy_probs(pi, &opt.end, &actions)?;
        let i = sample_index(&probs, rng);
        let (step, next) = extend_token(mdp, &opt.end, actions[i])?;
        opt.prob *= probs[i];
        opt.steps.push(step);
        opt.end = next;
        if opt.end.is_terminal() || opt.end.at_boundary() {
            return Ok(opt);
        }
    }
}

/// Up to `n` distinct next steps proposed by the policy.
fn propose<M: TaskMdp + ?Sized, R: Rng + ?Sized>(
    pi: &PolicyTable,
    mdp: &M,
    s: &State,
    n: usize,
    rng: &mut R,
) -> Result<Vec<StepOption>> {
    if let Some(mut pool) = enumerate_step_options(pi, mdp, s, PROPOSAL_ENUM_CAP)? {
        let mut out = Vec::with_capacity(n);
        while out.len() < n && !pool.is_empty() {
            let weights: Vec<f64> = pool.iter().map(|o| o.prob).collect();
            let i = match WeightedIndex::new(&weights) {
                Ok(d) => d.sample(rng),
                Err(_) => break,
            };
            out.push(pool.remove(i));
        }
        return Ok(out);
    }
    let mut out: Vec<StepOption> = Vec::with_capacity(n);
    for _ in 0..n {
        let opt = sample_step(pi, mdp, s, rng)?;
        if !out.iter().any(|o| o.end.tokens() == opt.end.tokens()) {
            out.push(opt);
        }
    }
    Ok(out)
}

fn finished_score(value: &ValueTable, steps: &[Step], reward: f64) -> Result<f64> {
    let last = steps.last().expect("finished candidates have steps");
    Ok(value.get(&last.state)? + reward)
}

/// Step-level beam search ranked by `V_φ`.
///
/// Each round every unfinished candidate proposes up to `b` distinct steps;
/// finished candidates carry over unchanged. The `b` best by score survive,
/// earlier candidates winning ties. A finished candidate scores
/// `V(s_{T−1}) + reward`.
pub fn beam_search<M: TaskMdp + ?Sized, R: Rng + ?Sized>(
    pi: &PolicyTable,
    value: &ValueTable,
    mdp: &M,
    s0: &State,
    b: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if b == 0 {
        return Err(OreoError::Config("beam width must be >= 1".into()));
    }
    if mdp.emits_observations() {
        return Err(OreoError::Config(format!(
            "beam search needs known dynamics; `{}` emits observations",
            mdp.env_id()
        )));
    }
    let mut beam = vec![BeamCandidate {
        steps: Vec::new(),
        state: s0.clone(),
        reward: 0.0,
        score: value.get(s0)?,
    }];
    while beam.iter().any(|c| !c.finished()) {
        let mut pool = Vec::new();
        for cand in beam {
            if cand.finished() {
                pool.push(cand);
                continue;
            }
            for opt in propose(pi, mdp, &cand.state, b, rng)? {
                let mut steps = cand.steps.clone();
                let reward = cand.reward + opt.steps.iter().map(|s| s.reward).sum::<f64>();
                steps.extend(opt.steps);
                let score = if opt.end.is_terminal() {
                    finished_score(value, &steps, reward)?
                } else {
                    value.get(&opt.end)?
                };
                pool.push(BeamCandidate {
                    steps,
                    state: opt.end,
                    reward,
                    score,
                });
            }
        }
        // stable sort keeps the lowest index first among equal scores
        pool.sort_by(|x, y| y.score.total_cmp(&x.score));
        pool.truncate(b);
        beam = pool;
    }
    let mut best = 0;
    for (i, c) in beam.iter().enumerate() {
        let cur = &beam[best];
        if c.score > cur.score || (c.score == cur.score && c.reward > cur.reward) {
            best = i;
        }
    }
    Ok(beam.swap_remove(best).into_trajectory())
}

/// Value of the state reached by appending `a` to `s`, before any observation.
fn afterstate_value<M: TaskMdp + ?Sized>(value: &ValueTable, mdp: &M, s: &State, a: TokenId) -> Result<f64> {
    let key = s.afterstate_key(a);
    if let Some(v) = value.get_key(&key) {
        return Ok(v);
    }
    let next = mdp.transition(s, a)?;
    if next.tokens() == key.as_slice() {
        return value.get(&next);
    }
    Err(OreoError::Contract(format!(
        "value table has no afterstate entry for {s:?} + {a}"
    )))
}

/// Sample `k` actions from π(·|s) and return the one whose afterstate value is
/// highest; ties go to the first sampled.
pub fn best_of_k<M: TaskMdp + ?Sized, R: Rng + ?Sized>(
    pi: &PolicyTable,
    value: &ValueTable,
    mdp: &M,
    s: &State,
    k: usize,
    rng: &mut R,
) -> Result<TokenId> {
    if k == 0 {
        return Err(OreoError::Config("K must be >= 1".into()));
    }
    let actions = mdp.legal_actions(s);
    let probs = policy_probs(pi, s, &actions)?;
    let first = actions[sample_index(&probs, rng)];
    if k == 1 {
        return Ok(first);
    }
    let mut best = (first, afterstate_value(value, mdp, s, first)?);
    for _ in 1..k {
        let a = actions[sample_index(&probs, rng)];
        if a == best.0 {
            continue;
        }
        let v = afterstate_value(value, mdp, s, a)?;
        if v > best.1 {
            best = (a, v);
        }
    }
    Ok(best.0)
}

/// `V(s_j) − V(s_i)`.
pub fn advantage_explicit(value: &ValueTable, s_i: &State, s_j: &State) -> Result<f64> {
    Ok(value.get(s_j)? - value.get(s_i)?)
}

/// `Σ β·log(π(a_t|s_t)/π_ref(a_t|s_t))` over the segment.
pub fn advantage_implicit(pi: &PolicyTable, reference: &PolicyTable, segment: &[Step], beta: f64) -> Result<f64> {
    let mut total = 0.0;
    for step in segment {
        total += beta * log_ratio(pi, reference, &step.state, step.action)?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageReport {
    pub start: usize,
    pub end: usize,
    pub a_explicit: f64,
    pub a_implicit: f64,
}

/// Both advantages of the segment from state index `i` to `j` of `traj`.
pub fn advantage_report(
    traj: &Trajectory,
    i: usize,
    j: usize,
    value: &ValueTable,
    pi: &PolicyTable,
    reference: &PolicyTable,
    beta: f64,
) -> Result<AdvantageReport> {
    if i >= j || j > traj.len() {
        return Err(OreoError::Contract(format!(
            "segment {i}..{j} invalid for trajectory of length {}",
            traj.len()
        )));
    }
    let s_i = &traj.steps[i].state;
    let s_j = if j == traj.len() {
        &traj.final_state
    } else {
        &traj.steps[j].state
    };
    let report = AdvantageReport {
        start: i,
        end: j,
        a_explicit: advantage_explicit(value, s_i, s_j)?,
        a_implicit: advantage_implicit(pi, reference, &traj.steps[i..j], beta)?,
    };
    if !(report.a_explicit.is_finite() && report.a_implicit.is_finite()) {
        return Err(OreoError::Numerical {
            state: crate::mdp::fmt_tokens(s_i.tokens()),
            detail: "non-finite advantage".into(),
        });
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Greedy,
    /// Plain sampling from π.
    Sample,
    Beam(usize),
    BestOfK(usize),
}

impl EvalMode {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::Greedy => "greedy",
            EvalMode::Sample => "sample",
            EvalMode::Beam(_) => "beam",
            EvalMode::BestOfK(_) => "bok",
        }
    }

    pub fn width(&self) -> Option<usize> {
        match self {
            EvalMode::Beam(n) | EvalMode::BestOfK(n) => Some(*n),
            _ => None,
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.width() {
            Some(n) => write!(f, "{}:{n}", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

impl FromStr for EvalMode {
    type Err = OreoError;
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let width = |default: usize| -> Result<usize> {
            let n = match arg {
                Some(a) => a
                    .parse()
                    .map_err(|_| OreoError::Config(format!("bad width in mode `{s}`")))?,
                None => default,
            };
            if n == 0 {
                return Err(OreoError::Config(format!("width must be >= 1 in mode `{s}`")));
            }
            Ok(n)
        };
        match name {
            "greedy" if arg.is_none() => Ok(EvalMode::Greedy),
            "sample" if arg.is_none() => Ok(EvalMode::Sample),
            "beam" => Ok(EvalMode::Beam(width(4)?)),
            "bok" => Ok(EvalMode::BestOfK(width(5)?)),
            _ => Err(OreoError::Config(format!("unknown eval mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    #[serde(rename = "B_or_K")]
    pub width: Option<usize>,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub seed: u64,
}

impl EvalReport {
    pub fn append_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

/// Run one episode in `mode`.
pub fn run_episode<M: TaskMdp + ?Sized, R: Rng + ?Sized>(
    pi: &PolicyTable,
    value: &ValueTable,
    mdp: &M,
    s0: &State,
    mode: EvalMode,
    rng: &mut R,
) -> Result<Trajectory> {
    match mode {
        EvalMode::Greedy => greedy_decode(pi, mdp, s0),
        EvalMode::Sample => rollout(mdp, s0, |s, actions| {
            Ok(sample_index(&policy_probs(pi, s, actions)?, rng))
        }),
        EvalMode::Beam(b) => beam_search(pi, value, mdp, s0, b, rng),
        EvalMode::BestOfK(k) => rollout(mdp, s0, |s, actions| {
            let a = best_of_k(pi, value, mdp, s, k, rng)?;
            Ok(actions
                .iter()
                .position(|x| *x == a)
                .expect("sampled from legal actions"))
        }),
    }
}

/// Evaluate over `episodes` episodes cycling through the task instances.
/// Episode `e` draws from its own stream, so results are order independent.
pub fn evaluate<M: TaskMdp + ?Sized>(
    pi: &PolicyTable,
    value: &ValueTable,
    mdp: &M,
    mode: EvalMode,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(OreoError::Config("episodes must be >= 1".into()));
    }
    if matches!(mode, EvalMode::Beam(_)) && mdp.emits_observations() {
        return Err(OreoError::Config(format!(
            "beam search is not applicable to `{}`: environment dynamics are unknown to the searcher",
            mdp.env_id()
        )));
    }
    let starts = mdp.initial_states();
    let (mut wins, mut reward, mut length) = (0usize, 0.0, 0usize);
    for e in 0..episodes {
        let mut rng = component_rng(seed, "eval", e as u64);
        let traj = run_episode(pi, value, mdp, &starts[e % starts.len()], mode, &mut rng)?;
        wins += usize::from(is_success(&traj));
        reward += traj.total_reward();
        length += traj.len();
    }
    let n = episodes as f64;
    Ok(EvalReport {
        mode: mode.name().to_string(),
        width: mode.width(),
        episodes,
        success_rate: wins as f64 / n,
        mean_reward: reward / n,
        mean_length: length as f64 / n,
        seed,
    })
}
