//! Repeated training runs and their summaries.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rcrl_core::agent::{self, EpisodeRecord, Outcome};
use rcrl_core::belief::PriorTemplate;
use rcrl_core::envs::Environment;
use serde::{Deserialize, Serialize};

use crate::config::{AgentKind, ExperimentConfig, TraceLevel};
use crate::error::{HarnessError, Result};

/// Trailing window for the convergence rules.
pub const WINDOW: usize = 50;
/// Success rate the trailing window must reach.
pub const THRESHOLD: f64 = 0.75;

pub const CONVERGENCE_RULE: &str = "episodes_to_convergence: first episode after which the \
     trailing 50-episode success rate stays >= 0.75 until the end of the run; \
     episodes_to_threshold: first episode at which that rate reaches 0.75";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub repeat: usize,
    pub seed: u64,
    pub successes: usize,
    pub failures: usize,
    pub timeouts: usize,
    pub episodes_to_convergence: Option<usize>,
    pub episodes_to_threshold: Option<usize>,
    /// Failures up to and including `episodes_to_threshold`.
    pub failures_to_threshold: Option<usize>,
    pub episodes: Vec<EpisodeRecord>,
    /// Steps taken from each state.
    pub visits: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub repeats: usize,
    pub total_episodes: usize,
    pub successes: usize,
    pub failures: usize,
    pub timeouts: usize,
    pub mean_successes: f64,
    pub mean_failures: f64,
    pub mean_timeouts: f64,
    /// Repeats whose success rate converged.
    pub converged: usize,
    /// Mean over converged repeats.
    pub mean_episodes_to_convergence: Option<f64>,
    pub mean_episodes_to_threshold: Option<f64>,
    pub mean_failures_to_threshold: Option<f64>,
}

/// Cell of the visitation heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitCell {
    pub x: usize,
    pub y: usize,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub convergence_rule: String,
    pub aggregate: Aggregate,
    pub repeats: Vec<RepeatSummary>,
    /// Steps taken from each grid cell, summed over repeats and over
    /// everything else a state encodes. Empty when the environment has no
    /// grid.
    pub visitation: Vec<VisitCell>,
    /// Per-step JSON lines for each repeat, when tracing is on.
    #[serde(skip)]
    pub traces: Vec<Vec<String>>,
}

/// First window end (1-based) at which the trailing success rate reaches the
/// threshold.
pub fn episodes_to_threshold(episodes: &[EpisodeRecord]) -> Option<usize> {
    trailing_rates(episodes).position(|ok| ok).map(|i| i + WINDOW)
}

/// First window end after which every trailing window meets the threshold.
pub fn episodes_to_convergence(episodes: &[EpisodeRecord]) -> Option<usize> {
    let ok: Vec<bool> = trailing_rates(episodes).collect();
    let failing_tail = ok.iter().rposition(|&x| !x);
    match failing_tail {
        None if ok.is_empty() => None,
        None => Some(WINDOW),
        Some(i) if i + 1 < ok.len() => Some(i + 1 + WINDOW),
        Some(_) => None,
    }
}

/// Whether each full trailing window meets the threshold, in order.
fn trailing_rates(episodes: &[EpisodeRecord]) -> impl Iterator<Item = bool> + '_ {
    episodes.windows(WINDOW).map(|w| {
        let wins = w.iter().filter(|e| e.outcome == Outcome::Success).count();
        wins as f64 >= THRESHOLD * WINDOW as f64
    })
}

fn count(episodes: &[EpisodeRecord], outcome: Outcome) -> usize {
    episodes.iter().filter(|e| e.outcome == outcome).count()
}

fn summarize_repeat(repeat: usize, seed: u64, episodes: Vec<EpisodeRecord>, visits: Vec<u64>) -> RepeatSummary {
    let threshold = episodes_to_threshold(&episodes);
    RepeatSummary {
        repeat,
        seed,
        successes: count(&episodes, Outcome::Success),
        failures: count(&episodes, Outcome::Failure),
        timeouts: count(&episodes, Outcome::Timeout),
        episodes_to_convergence: episodes_to_convergence(&episodes),
        episodes_to_threshold: threshold,
        failures_to_threshold: threshold.map(|t| count(&episodes[..t], Outcome::Failure)),
        episodes,
        visits,
    }
}

fn mean_of(values: impl Iterator<Item = Option<usize>>) -> Option<f64> {
    let got: Vec<usize> = values.flatten().collect();
    (!got.is_empty()).then(|| got.iter().sum::<usize>() as f64 / got.len() as f64)
}

pub fn aggregate(repeats: &[RepeatSummary]) -> Aggregate {
    let n = repeats.len();
    let sum = |f: fn(&RepeatSummary) -> usize| repeats.iter().map(f).sum::<usize>();
    let mean = |total: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
    let (successes, failures, timeouts) = (sum(|r| r.successes), sum(|r| r.failures), sum(|r| r.timeouts));
    Aggregate {
        repeats: n,
        total_episodes: sum(|r| r.episodes.len()),
        successes,
        failures,
        timeouts,
        mean_successes: mean(successes),
        mean_failures: mean(failures),
        mean_timeouts: mean(timeouts),
        converged: repeats.iter().filter(|r| r.episodes_to_convergence.is_some()).count(),
        mean_episodes_to_convergence: mean_of(repeats.iter().map(|r| r.episodes_to_convergence)),
        mean_episodes_to_threshold: mean_of(repeats.iter().map(|r| r.episodes_to_threshold)),
        mean_failures_to_threshold: mean_of(repeats.iter().map(|r| r.failures_to_threshold)),
    }
}

/// Sums state visits onto grid cells. Every cell appears, ordered by
/// `(y, x)`.
pub fn visitation(env: &Environment, repeats: &[RepeatSummary]) -> Vec<VisitCell> {
    let Some(meta) = env.mdp.metadata() else {
        return Vec::new();
    };
    let mut grid = vec![0u64; meta.width * meta.height];
    for r in repeats {
        for (s, &v) in r.visits.iter().enumerate() {
            let (x, y) = meta.positions[s];
            grid[y * meta.width + x] += v;
        }
    }
    grid.into_iter()
        .enumerate()
        .map(|(i, count)| VisitCell {
            x: i % meta.width,
            y: i / meta.width,
            count,
        })
        .collect()
}

/// Runs one repeat with its own generator.
fn run_repeat(
    config: &ExperimentConfig,
    env: &Environment,
    prior: &Option<Arc<PriorTemplate>>,
    repeat: usize,
) -> Result<(RepeatSummary, Vec<String>)> {
    let seed = config.base_seed.wrapping_add(repeat as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agent_config = config.agent_config();
    let mut trace = Vec::new();
    let (episodes, visits) = match config.agent {
        AgentKind::Rcrl => {
            let prior = prior.clone().expect("prior is built for the cautious agent");
            let run = if config.trace_level == TraceLevel::Steps {
                agent::rcrl_train_traced(env, prior, &agent_config, &mut rng, &mut |t| {
                    trace.push(
                        serde_json::json!({
                            "episode": t.episode,
                            "step": t.step,
                            "state": t.state,
                            "confidence": t.confidence,
                            "risks": t.risks,
                            "safe_set": t.safe_set,
                            "action": t.action,
                            "next": t.next,
                            "reward": t.reward,
                        })
                        .to_string(),
                    )
                })?
            } else {
                agent::rcrl_train(env, prior, &agent_config, &mut rng)?
            };
            (run.episodes, run.visits)
        }
        AgentKind::QlPenalty => {
            let run = agent::ql_penalty_train(env, &agent_config, config.penalty, &mut rng)?;
            (run.episodes, run.visits)
        }
    };
    Ok((summarize_repeat(repeat, seed, episodes, visits), trace))
}

/// Runs every repeat (concurrently, each seeded with `base_seed + k`) and
/// summarizes them.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let env = config.build_environment()?;
    if config.agent == AgentKind::Rcrl && config.m > env.boundary {
        return Err(HarnessError::Config(format!(
            "m = {} exceeds the observation boundary {} of {}",
            config.m, env.boundary, env.name
        )));
    }
    let prior = match config.agent {
        AgentKind::Rcrl => Some(Arc::new(PriorTemplate::from_successors(&env.successors, config.prior)?)),
        AgentKind::QlPenalty => None,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = config.workers {
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    let results: Vec<(RepeatSummary, Vec<String>)> = pool.install(|| {
        (0..config.num_repeats)
            .into_par_iter()
            .map(|k| run_repeat(config, &env, &prior, k))
            .collect::<Result<_>>()
    })?;
    let (repeats, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(RunSummary {
        config: config.clone(),
        convergence_rule: CONVERGENCE_RULE.into(),
        aggregate: aggregate(&repeats),
        visitation: visitation(&env, &repeats),
        repeats,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(episode: usize, win: bool) -> EpisodeRecord {
        EpisodeRecord {
            episode,
            outcome: if win { Outcome::Success } else { Outcome::Failure },
            steps: 1,
            reward: 0.0,
            safety_mode_entries: 0,
        }
    }

    fn run(pattern: impl Fn(usize) -> bool, n: usize) -> Vec<EpisodeRecord> {
        (1..=n).map(|e| record(e, pattern(e))).collect()
    }

    #[test]
    fn convergence_needs_a_full_window() {
        assert_eq!(episodes_to_convergence(&run(|_| true, 49)), None);
        assert_eq!(episodes_to_convergence(&run(|_| true, 50)), Some(50));
        assert_eq!(episodes_to_threshold(&run(|_| true, 80)), Some(50));
    }

    #[test]
    fn convergence_waits_for_the_last_dip() {
        // losses in 1..=100, wins afterwards: the window ending at e holds
        // e - 100 wins, so 38 wins first happen at e = 138
        let eps = run(|e| e > 100, 300);
        assert_eq!(episodes_to_threshold(&eps), Some(138));
        assert_eq!(episodes_to_convergence(&eps), Some(138));
        // a later losing streak pushes convergence, not the threshold
        let eps = run(|e| e > 100 && !(200..215).contains(&e), 400);
        assert_eq!(episodes_to_threshold(&eps), Some(138));
        assert!(episodes_to_convergence(&eps).unwrap() > 214);
        // losing at the end never converges
        let eps = run(|e| e <= 100, 200);
        assert_eq!(episodes_to_convergence(&eps), None);
    }

    #[test]
    fn aggregate_sums_repeats() {
        let a = summarize_repeat(0, 1, run(|e| e % 2 == 0, 10), vec![]);
        let b = summarize_repeat(1, 2, run(|_| true, 10), vec![]);
        let agg = aggregate(&[a, b]);
        assert_eq!(agg.successes, 15);
        assert_eq!(agg.failures, 5);
        assert_eq!(agg.total_episodes, 20);
        assert_eq!(agg.mean_successes, 7.5);
        assert_eq!(agg.successes + agg.failures + agg.timeouts, agg.total_episodes);
    }
}
