//! The cautious double learner: a softmax Q-learner whose choices are
//! restricted to actions the risk model deems safe enough, plus the unfiltered
//! Q-learning baseline.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{DirichletBelief, PriorTemplate};
use crate::envs::Environment;
use crate::error::{precondition, Result};
use crate::mdp::{ActionId, StateId};
use crate::risk::{self, ActionRisk, SafeSet};

/// Tabular action values, zero-initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, s: StateId, a: ActionId) -> f64 {
        self.values[s.0 * self.num_actions + a.0]
    }

    pub fn set(&mut self, s: StateId, a: ActionId, value: f64) {
        self.values[s.0 * self.num_actions + a.0] = value;
    }

    pub fn row(&self, s: StateId) -> &[f64] {
        &self.values[s.0 * self.num_actions..(s.0 + 1) * self.num_actions]
    }

    pub fn max(&self, s: StateId) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One-step Q-learning update of `Q(s, a)` after observing `r` and `next`.
pub fn q_update(q: &mut QTable, s: StateId, a: ActionId, r: f64, next: StateId, mu: f64, gamma: f64) {
    let target = r + gamma * q.max(next);
    let old = q.get(s, a);
    q.set(s, a, (1.0 - mu) * old + mu * target);
}

/// Samples from `safe` with probability proportional to `exp(Q / temperature)`.
///
/// # Panics
/// If `safe` is empty or the temperature is not positive.
pub fn softmax_select<R: Rng + ?Sized>(
    q_row: &[f64],
    safe: &[ActionId],
    temperature: f64,
    rng: &mut R,
) -> ActionId {
    assert!(!safe.is_empty(), "softmax over an empty action set");
    assert!(temperature > 0.0, "temperature must be positive");
    if safe.len() == 1 {
        return safe[0];
    }
    let top = safe.iter().map(|a| q_row[a.0]).fold(f64::NEG_INFINITY, f64::max);
    let weights = safe.iter().map(|a| ((q_row[a.0] - top) / temperature).exp());
    let dist = WeightedIndex::new(weights).expect("the top action has weight one");
    safe[dist.sample(rng)]
}

/// Required confidence `C(n) = c0 * decay^n`, where `n` counts how often a
/// state has been acted from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSchedule {
    pub c0: f64,
    pub decay: f64,
    visits: Vec<u64>,
}

impl ConfidenceSchedule {
    pub fn new(c0: f64, decay: f64, num_states: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&c0) {
            return Err(precondition(format!("c0 = {c0} outside [0, 1)")));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(precondition(format!("decay = {decay} outside (0, 1)")));
        }
        Ok(Self {
            c0,
            decay,
            visits: vec![0; num_states],
        })
    }

    pub fn at(&self, n: u64) -> f64 {
        // powi takes i32; past that the value underflows to zero anyway
        self.c0 * self.decay.powi(n.min(i32::MAX as u64) as i32)
    }

    pub fn confidence(&self, s: StateId) -> f64 {
        self.at(self.visits[s.0])
    }

    pub fn visits(&self, s: StateId) -> u64 {
        self.visits[s.0]
    }

    pub fn record_visit(&mut self, s: StateId) {
        self.visits[s.0] += 1;
    }

    pub fn visit_counts(&self) -> &[u64] {
        &self.visits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Learning rate.
    pub mu: f64,
    pub gamma: f64,
    /// Risk horizon; at most the environment's observation boundary.
    pub m: usize,
    pub phi_max: f64,
    pub temperature: f64,
    pub max_steps: usize,
    pub max_episodes: usize,
    pub c0: f64,
    pub decay: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            mu: 0.85,
            gamma: 0.9,
            m: 2,
            phi_max: 0.01,
            temperature: 0.1,
            max_steps: 400,
            max_episodes: 500,
            c0: 0.9,
            decay: 0.99,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(precondition(format!("mu = {} outside (0, 1]", self.mu)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(precondition(format!("gamma = {} outside (0, 1]", self.gamma)));
        }
        if self.m == 0 {
            return Err(precondition("risk horizon m must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(precondition(format!("temperature = {} must be positive", self.temperature)));
        }
        if self.phi_max.is_nan() {
            return Err(precondition("phi_max is NaN"));
        }
        ConfidenceSchedule::new(self.c0, self.decay, 0)?;
        Ok(())
    }

    fn check_env(&self, env: &Environment) -> Result<()> {
        self.validate()?;
        if self.m > env.boundary {
            return Err(precondition(format!(
                "risk horizon {} exceeds the observation boundary {}",
                self.m, env.boundary
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    /// Entered an unsafe state.
    Failure,
    Timeout,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// 1-based.
    pub episode: usize,
    pub outcome: Outcome,
    pub steps: usize,
    pub reward: f64,
    /// Number of times the agent switched into safety mode.
    pub safety_mode_entries: usize,
}

/// Everything the agent saw and did on one step.
#[derive(Debug, Clone, Copy)]
pub struct StepTrace<'a> {
    pub episode: usize,
    pub step: usize,
    pub state: StateId,
    pub confidence: f64,
    pub risks: &'a [ActionRisk],
    pub safe_set: &'a SafeSet,
    pub action: ActionId,
    pub next: StateId,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub q: QTable,
    pub belief: DirichletBelief,
    pub episodes: Vec<EpisodeRecord>,
    /// Steps taken from each state over the whole run.
    pub visits: Vec<u64>,
}

/// Learner state carried across episodes.
#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub q: QTable,
    pub belief: DirichletBelief,
    pub schedule: ConfidenceSchedule,
}

impl Agent {
    pub fn new(env: &Environment, prior: Arc<PriorTemplate>, config: AgentConfig) -> Result<Self> {
        config.check_env(env)?;
        let (n, k) = (env.mdp.num_states(), env.mdp.num_actions());
        if prior.num_states() != n || prior.num_actions() != k {
            return Err(precondition(format!(
                "prior is {}x{} but the environment is {n}x{k}",
                prior.num_states(),
                prior.num_actions()
            )));
        }
        Ok(Self {
            q: QTable::new(n, k),
            belief: DirichletBelief::new(prior),
            schedule: ConfidenceSchedule::new(config.c0, config.decay, n)?,
            config,
        })
    }

    /// Assess, filter, choose, act, then update belief, Q-values and the
    /// visit count of `s`. Returns the successor, the reward and whether
    /// safety mode was on, after handing the step to `observer`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        env: &Environment,
        s: StateId,
        (episode, step): (usize, usize),
        rng: &mut R,
        observer: &mut dyn FnMut(&StepTrace<'_>),
    ) -> Result<(StateId, f64, bool)> {
        let obs = env.mdp.observe(s, env.boundary)?;
        let confidence = self.schedule.confidence(s);
        let assessment = risk::assess(&self.belief.moments(), &obs, self.config.m, s, confidence)?;
        let safe = risk::safe_action_set(&assessment, self.config.phi_max);
        let action = softmax_select(self.q.row(s), &safe.actions, self.config.temperature, rng);
        let (next, reward) = env.mdp.step(s, action, rng)?;
        self.belief.update(s, action, next)?;
        q_update(&mut self.q, s, action, reward, next, self.config.mu, self.config.gamma);
        self.schedule.record_visit(s);
        observer(&StepTrace {
            episode,
            step,
            state: s,
            confidence,
            risks: &assessment.actions,
            safe_set: &safe,
            action,
            next,
            reward,
        });
        Ok((next, reward, safe.safety_mode))
    }

    /// Runs one episode from the initial state.
    pub fn run_episode<R: Rng + ?Sized>(
        &mut self,
        env: &Environment,
        episode: usize,
        rng: &mut R,
        observer: &mut dyn FnMut(&StepTrace<'_>),
    ) -> Result<EpisodeRecord> {
        let mut s = env.mdp.initial_state();
        let mut reward = 0.0;
        let mut entries = 0;
        let mut in_safety_mode = false;
        let mut steps = 0;
        while steps < self.config.max_steps && !env.mdp.is_terminal(s) {
            let (next, r, safety_mode) = self.step(env, s, (episode, steps), rng, observer)?;
            if safety_mode && !in_safety_mode {
                entries += 1;
            }
            in_safety_mode = safety_mode;
            reward += r;
            s = next;
            steps += 1;
        }
        Ok(EpisodeRecord {
            episode,
            outcome: outcome_of(env, s),
            steps,
            reward,
            safety_mode_entries: entries,
        })
    }
}

fn outcome_of(env: &Environment, s: StateId) -> Outcome {
    if env.mdp.is_unsafe(s) {
        Outcome::Failure
    } else if env.mdp.is_goal(s) {
        Outcome::Success
    } else {
        Outcome::Timeout
    }
}

/// Trains the cautious agent for `config.max_episodes` episodes.
pub fn rcrl_train<R: Rng + ?Sized>(
    env: &Environment,
    prior: Arc<PriorTemplate>,
    config: &AgentConfig,
    rng: &mut R,
) -> Result<TrainingRun> {
    rcrl_train_traced(env, prior, config, rng, &mut |_| {})
}

/// [`rcrl_train`] with a callback on every step.
pub fn rcrl_train_traced<R: Rng + ?Sized>(
    env: &Environment,
    prior: Arc<PriorTemplate>,
    config: &AgentConfig,
    rng: &mut R,
    observer: &mut dyn FnMut(&StepTrace<'_>),
) -> Result<TrainingRun> {
    let mut agent = Agent::new(env, prior, config.clone())?;
    let mut episodes = Vec::with_capacity(config.max_episodes);
    for episode in 1..=config.max_episodes {
        episodes.push(agent.run_episode(env, episode, rng, observer)?);
    }
    Ok(TrainingRun {
        visits: agent.schedule.visit_counts().to_vec(),
        q: agent.q,
        belief: agent.belief,
        episodes,
    })
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub q: QTable,
    pub episodes: Vec<EpisodeRecord>,
    pub visits: Vec<u64>,
}

/// Plain softmax Q-learning over all actions. Entering an unsafe state ends
/// the episode with reward `penalty`. Only `mu`, `gamma`, `temperature`,
/// `max_steps` and `max_episodes` of the config are used.
pub fn ql_penalty_train<R: Rng + ?Sized>(
    env: &Environment,
    config: &AgentConfig,
    penalty: f64,
    rng: &mut R,
) -> Result<BaselineRun> {
    config.validate()?;
    let mdp = &env.mdp;
    let all: Vec<ActionId> = (0..mdp.num_actions()).map(ActionId).collect();
    let mut q = QTable::new(mdp.num_states(), mdp.num_actions());
    let mut visits = vec![0; mdp.num_states()];
    let mut episodes = Vec::with_capacity(config.max_episodes);
    for episode in 1..=config.max_episodes {
        let mut s = mdp.initial_state();
        let mut total = 0.0;
        let mut steps = 0;
        while steps < config.max_steps && !mdp.is_terminal(s) {
            let a = softmax_select(q.row(s), &all, config.temperature, rng);
            let (next, mut r) = mdp.step(s, a, rng)?;
            if mdp.is_unsafe(next) {
                r = penalty;
            }
            q_update(&mut q, s, a, r, next, config.mu, config.gamma);
            visits[s.0] += 1;
            total += r;
            s = next;
            steps += 1;
        }
        episodes.push(EpisodeRecord {
            episode,
            outcome: outcome_of(env, s),
            steps,
            reward: total,
            safety_mode_entries: 0,
        });
    }
    Ok(BaselineRun { q, episodes, visits })
}
