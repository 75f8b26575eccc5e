//! Independent checks for the approximations in [`crate::risk`].
//!
//! Nothing here shares code with the back-propagation: the matrix form builds
//! explicit `N x N` transition matrices, the true risk is a memoized path
//! recursion, and the Monte-Carlo estimator samples whole kernels from the
//! belief and evaluates the frozen-policy polynomial on each draw.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::belief::{DirichletBelief, PriorTemplate};
use crate::error::{precondition, Error, Result};
use crate::mdp::{ActionId, Observation, StateId, TabularMdp, TransitionModel};
use crate::risk::{self, SafestPolicy};

/// Minimum number of draws accepted by [`mc_moments`].
pub const MIN_MC_SAMPLES: usize = 1000;

/// A kernel with explicit, freely editable entries. Rows need not sum to one,
/// which is what finite differences require.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitKernel {
    num_states: usize,
    num_actions: usize,
    rows: Vec<Vec<(StateId, f64)>>,
}

impl ExplicitKernel {
    /// Copies every row of `model`.
    pub fn from_model<T: TransitionModel + ?Sized>(model: &T) -> Self {
        let (n, k) = (model.num_states(), model.num_actions());
        let mut rows = Vec::with_capacity(n * k);
        for s in 0..n {
            for a in 0..k {
                let mut row = Vec::new();
                model.visit_row(StateId(s), ActionId(a), &mut |j, p| row.push((j, p)));
                row.sort_by_key(|e| e.0);
                rows.push(row);
            }
        }
        Self {
            num_states: n,
            num_actions: k,
            rows,
        }
    }

    /// One kernel drawn from the belief: each row is an independent Dirichlet
    /// sample, generated by normalizing independent Gamma draws.
    pub fn sample<R: Rng + ?Sized>(belief: &DirichletBelief, rng: &mut R) -> Result<Self> {
        let (n, k) = (belief.num_states(), belief.num_actions());
        let mut rows = Vec::with_capacity(n * k);
        for s in 0..n {
            for a in 0..k {
                rows.push(sample_row(belief, StateId(s), ActionId(a), rng)?);
            }
        }
        Ok(Self {
            num_states: n,
            num_actions: k,
            rows,
        })
    }

    pub fn row(&self, s: StateId, a: ActionId) -> &[(StateId, f64)] {
        &self.rows[s.0 * self.num_actions + a.0]
    }

    pub fn row_mut(&mut self, s: StateId, a: ActionId) -> &mut Vec<(StateId, f64)> {
        &mut self.rows[s.0 * self.num_actions + a.0]
    }

    /// Dense `N x N` matrix of action `a`'s rows, `matrix[i][j] = x^{ij}_a`.
    fn dense(&self, i: StateId, a: ActionId, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(j, p) in self.row(i, a) {
            out[j.0] += p;
        }
    }
}

impl TransitionModel for ExplicitKernel {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn visit_row(&self, s: StateId, a: ActionId, f: &mut dyn FnMut(StateId, f64)) {
        for &(j, p) in self.row(s, a) {
            f(j, p);
        }
    }
}

fn sample_row<R: Rng + ?Sized>(
    belief: &DirichletBelief,
    s: StateId,
    a: ActionId,
    rng: &mut R,
) -> Result<Vec<(StateId, f64)>> {
    let row = belief.row(s, a);
    let mut draws = Vec::with_capacity(row.support.len());
    let mut total = 0.0;
    for (j, alpha) in row.iter() {
        let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidConcentration {
            state: s.0,
            action: a.0,
            reason: e.to_string(),
        })?;
        let g: f64 = gamma.sample(rng);
        total += g;
        draws.push((j, g));
    }
    if total > 0.0 {
        for d in &mut draws {
            d.1 /= total;
        }
    } else {
        // Every Gamma draw underflowed (tiny alphas); fall back to the mode
        // of the largest concentration.
        let (best, _) = row
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (p, (_, alpha))| if alpha > acc.1 { (p, alpha) } else { acc });
        for (p, d) in draws.iter_mut().enumerate() {
            d.1 = if p == best { 1.0 } else { 0.0 };
        }
    }
    Ok(draws)
}

/// Risk of every action at `s` as the `s` entry of
/// `P'_{m-1}[x] ... P'_1[x] P'_0[x] g^0`.
///
/// `P'_n` uses the policy's action at level `n + 1` on safe observed rows and
/// the query action on the final row; rows of observed-unsafe and unobserved
/// states are identity rows. A safe observed state the policy does not cover
/// at some level gets a zero row there; its value cannot reach `s`.
pub fn matrix_risk(
    model: &ExplicitKernel,
    obs: &Observation,
    m: usize,
    s: StateId,
    policy: &SafestPolicy,
) -> Result<Vec<f64>> {
    let n = model.num_states;
    if m == 0 || m > obs.boundary {
        return Err(precondition(format!(
            "horizon {m} must lie in 1..={}",
            obs.boundary
        )));
    }
    if s.0 >= n {
        return Err(Error::StateOutOfRange { index: s.0, len: n });
    }
    let mut g: Vec<f64> = (0..n)
        .map(|j| if obs.is_observed_unsafe(StateId(j)) { 1.0 } else { 0.0 })
        .collect();
    let mut matrix = vec![vec![0.0; n]; n];
    for level in 0..m - 1 {
        for (i, row) in matrix.iter_mut().enumerate() {
            let si = StateId(i);
            if !obs.is_observed(si) || obs.is_observed_unsafe(si) {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[i] = 1.0;
            } else if let Some(b) = policy.choice(level + 1, si) {
                model.dense(si, b, row);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        g = mat_vec(&matrix, &g);
    }
    if obs.is_observed_unsafe(s) {
        return Ok(vec![1.0; model.num_actions]);
    }
    let mut last = vec![0.0; n];
    Ok((0..model.num_actions)
        .map(|a| {
            model.dense(s, ActionId(a), &mut last);
            // successors outside the observation carry no risk
            (0..n)
                .filter(|&j| obs.is_observed(StateId(j)))
                .map(|j| last[j] * g[j])
                .sum()
        })
        .collect())
}

fn mat_vec(matrix: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    matrix
        .iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Probability of entering an observed unsafe state within `m` steps under
/// `model`, taking `a` at `s` and then following `policy`.
///
/// Evaluated on the true kernel this is the true risk of the believed-safest
/// policy; on the belief means it reproduces the believed risk.
pub fn true_risk<T: TransitionModel + ?Sized>(
    model: &T,
    obs: &Observation,
    m: usize,
    s: StateId,
    a: ActionId,
    policy: &SafestPolicy,
) -> Result<f64> {
    if m == 0 || m > obs.boundary {
        return Err(precondition(format!(
            "horizon {m} must lie in 1..={}",
            obs.boundary
        )));
    }
    if obs.is_observed_unsafe(s) {
        return Ok(1.0);
    }
    let mut memo = HashMap::new();
    let mut total = 0.0;
    let mut err = None;
    model.visit_row(s, a, &mut |j, p| {
        if err.is_none() {
            match path_risk(model, obs, m - 1, j, policy, &mut memo) {
                Ok(r) => total += p * r,
                Err(e) => err = Some(e),
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(total),
    }
}

fn path_risk<T: TransitionModel + ?Sized>(
    model: &T,
    obs: &Observation,
    level: usize,
    k: StateId,
    policy: &SafestPolicy,
    memo: &mut HashMap<(usize, StateId), f64>,
) -> Result<f64> {
    if !obs.is_observed(k) {
        return Ok(0.0);
    }
    if obs.is_observed_unsafe(k) {
        return Ok(1.0);
    }
    if level == 0 {
        return Ok(0.0);
    }
    if let Some(&v) = memo.get(&(level, k)) {
        return Ok(v);
    }
    let b = policy.choice(level, k).ok_or_else(|| {
        precondition(format!("policy has no action at level {level}, state {k}"))
    })?;
    let mut successors = Vec::new();
    model.visit_row(k, b, &mut |j, p| successors.push((j, p)));
    let mut total = 0.0;
    for (j, p) in successors {
        total += p * path_risk(model, obs, level - 1, j, policy, memo)?;
    }
    memo.insert((level, k), total);
    Ok(total)
}

/// Central finite differences of the frozen-policy risk with respect to every
/// entry of every row, `((i, b, j), derivative)`.
pub fn finite_difference_gradient(
    model: &ExplicitKernel,
    obs: &Observation,
    m: usize,
    s: StateId,
    a: ActionId,
    policy: &SafestPolicy,
    step: f64,
) -> Result<Vec<((StateId, ActionId, StateId), f64)>> {
    let mut out = Vec::new();
    let mut work = model.clone();
    for i in 0..model.num_states {
        for b in 0..model.num_actions {
            let (i, b) = (StateId(i), ActionId(b));
            for pos in 0..model.row(i, b).len() {
                let (j, x) = model.row(i, b)[pos];
                work.row_mut(i, b)[pos].1 = x + step;
                let up = matrix_risk(&work, obs, m, s, policy)?[a.0];
                work.row_mut(i, b)[pos].1 = x - step;
                let down = matrix_risk(&work, obs, m, s, policy)?[a.0];
                work.row_mut(i, b)[pos].1 = x;
                out.push(((i, b, j), (up - down) / (2.0 * step)));
            }
        }
    }
    Ok(out)
}

/// Sample moments of the believed risk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McMomentEstimate {
    pub mean: f64,
    pub variance: f64,
    pub num_samples: usize,
    pub mean_se: f64,
    pub variance_se: f64,
}

impl McMomentEstimate {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(precondition("moment estimates need at least two samples"));
        }
        let nf = n as f64;
        let mean = samples.iter().sum::<f64>() / nf;
        let (m2, m4) = samples.iter().fold((0.0, 0.0), |(m2, m4), &x| {
            let d = x - mean;
            (m2 + d * d, m4 + d * d * d * d)
        });
        let variance = m2 / (nf - 1.0);
        let fourth = m4 / nf;
        let pop_var = m2 / nf;
        Ok(Self {
            mean,
            variance,
            num_samples: n,
            mean_se: (variance / nf).sqrt(),
            variance_se: ((fourth - pop_var * pop_var).max(0.0) / nf).sqrt(),
        })
    }
}

/// Draws `num_samples` kernels from the belief and evaluates the
/// frozen-policy risk of `(s, a)` on each.
#[allow(clippy::too_many_arguments)]
pub fn sample_risks<R: Rng + ?Sized>(
    belief: &DirichletBelief,
    obs: &Observation,
    m: usize,
    s: StateId,
    a: ActionId,
    policy: &SafestPolicy,
    num_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    (0..num_samples)
        .map(|_| {
            let kernel = ExplicitKernel::sample(belief, rng)?;
            true_risk(&kernel, obs, m, s, a, policy)
        })
        .collect()
}

/// Monte-Carlo mean and variance of `g^m(s, a)[p]` under the belief.
#[allow(clippy::too_many_arguments)]
pub fn mc_moments<R: Rng + ?Sized>(
    belief: &DirichletBelief,
    obs: &Observation,
    m: usize,
    s: StateId,
    a: ActionId,
    policy: &SafestPolicy,
    num_samples: usize,
    rng: &mut R,
) -> Result<McMomentEstimate> {
    if num_samples < MIN_MC_SAMPLES {
        return Err(precondition(format!(
            "at least {MIN_MC_SAMPLES} samples required, got {num_samples}"
        )));
    }
    McMomentEstimate::from_samples(&sample_risks(belief, obs, m, s, a, policy, num_samples, rng)?)
}

/// Fraction of `samples` at or below `phi`.
pub fn coverage(samples: &[f64], phi: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    samples.iter().filter(|&&x| x <= phi).count() as f64 / samples.len() as f64
}

/// Standardized residuals `(rho_bar - rho) / sqrt(V_bar)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSample {
    pub values: Vec<f64>,
    /// Replications dropped because `V_bar` was zero.
    pub excluded: usize,
}

impl ResidualSample {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let n = self.values.len() as f64;
        self.values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    }
}

/// Replicates the asymptotic-normality statistic: each replication witnesses
/// `n_transitions` i.i.d. samples from every true row of the observed states,
/// forms the posterior from `prior`, and standardizes the believed risk of
/// `(s, a)` against the true risk of the replication's own safest policy.
///
/// Replication `r` uses a generator seeded with `base_seed + r`.
#[allow(clippy::too_many_arguments)]
pub fn theorem1_residuals<R: Rng + SeedableRng>(
    mdp: &TabularMdp,
    prior: &std::sync::Arc<PriorTemplate>,
    obs: &Observation,
    m: usize,
    s: StateId,
    a: ActionId,
    n_transitions: u64,
    n_replications: usize,
    base_seed: u64,
) -> Result<ResidualSample> {
    // Degenerate risks have no limiting distribution.
    let truth = risk::risk_backprop(mdp, obs, m, s)?;
    let exact = truth.rho_bar[a.0];
    if exact <= 0.0 || exact >= 1.0 {
        return Err(precondition(format!(
            "true risk {exact} of the query is degenerate (0 or 1)"
        )));
    }
    let mut values = Vec::with_capacity(n_replications);
    let mut excluded = 0;
    for r in 0..n_replications {
        let mut rng = R::seed_from_u64(base_seed.wrapping_add(r as u64));
        let mut belief = DirichletBelief::new(prior.clone());
        for &k in &obs.observed {
            for b in 0..mdp.num_actions() {
                let b = ActionId(b);
                let row = mdp.row(k, b);
                let mut counts = vec![0u64; row.successors().len()];
                for _ in 0..n_transitions {
                    let next = row.sample(&mut rng);
                    let pos = row.successors().binary_search(&next).expect("sampled from row");
                    counts[pos] += 1;
                }
                for (&j, &c) in row.successors().iter().zip(&counts) {
                    belief.update_many(k, b, j, c)?;
                }
            }
        }
        let moments = belief.moments();
        let bp = risk::risk_backprop(&moments, obs, m, s)?;
        let grad = risk::risk_gradient(&moments, obs, m, s, a, &bp.policy)?;
        let v_bar = risk::variance_approx(&grad, &moments);
        if v_bar <= 0.0 {
            excluded += 1;
            continue;
        }
        let rho = true_risk(mdp, obs, m, s, a, &bp.policy)?;
        values.push((bp.rho_bar[a.0] - rho) / v_bar.sqrt());
    }
    Ok(ResidualSample { values, excluded })
}

/// A synthetic risk query: a belief, what is observed, and where to ask.
#[derive(Debug, Clone)]
pub struct Instance {
    pub belief: DirichletBelief,
    pub obs: Observation,
    pub horizon: usize,
    pub state: StateId,
}

/// Random query on up to `max_states` states and `max_actions` actions.
///
/// Rows have random supports and concentrations in `[0.2, 10)`; the unsafe
/// set and the observed set are random (the query state is always observed
/// and safe), and the horizon is uniform in `1..=max_horizon`.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    max_states: usize,
    max_actions: usize,
    max_horizon: usize,
) -> Instance {
    let n = rng.random_range(2..=max_states);
    let k = rng.random_range(1..=max_actions);
    let m = rng.random_range(1..=max_horizon);
    let mut rows = Vec::with_capacity(n * k);
    for _ in 0..n * k {
        let size = rng.random_range(1..=n);
        let mut support: Vec<usize> = sample_indices(rng, n, size).into_vec();
        support.sort_unstable();
        rows.push(
            support
                .into_iter()
                .map(|j| (StateId(j), rng.random_range(0.2..10.0)))
                .collect(),
        );
    }
    let belief = DirichletBelief::from_rows(n, k, rows).expect("generated rows are valid");
    let unsafe_states: Vec<StateId> = (1..n).filter(|_| rng.random_bool(0.35)).map(StateId).collect();
    let observed: Vec<StateId> = (0..n)
        .filter(|&j| j == 0 || rng.random_bool(0.8))
        .map(StateId)
        .collect();
    Instance {
        belief,
        obs: Observation::from_sets(StateId(0), m, observed, unsafe_states),
        horizon: m,
        state: StateId(0),
    }
}

/// Query whose frozen-policy risk polynomial uses every row at most once.
///
/// States form `horizon` layers of `width` safe states behind the root,
/// followed by `pits` unsafe states. Every row of a non-final layer spreads
/// over the next layer and the pits with total concentration at least
/// `min_alpha0`; final-layer and pit rows are self-loops. Because no row
/// repeats along a path, the believed risk is multilinear in independent
/// rows and its exact mean equals the back-propagated value.
pub fn layered_instance<R: Rng + ?Sized>(
    rng: &mut R,
    horizon: usize,
    width: usize,
    pits: usize,
    num_actions: usize,
    min_alpha0: f64,
) -> Instance {
    assert!(horizon >= 1 && width >= 1 && pits >= 1 && num_actions >= 1);
    let layer_start = |layer: usize| if layer == 0 { 0 } else { 1 + (layer - 1) * width };
    let layer_len = |layer: usize| if layer == 0 { 1 } else { width };
    let first_pit = 1 + horizon * width;
    let n = first_pit + pits;
    let mut rows = Vec::with_capacity(n * num_actions);
    for state in 0..n {
        let layer = if state == 0 {
            0
        } else if state < first_pit {
            1 + (state - 1) / width
        } else {
            usize::MAX
        };
        for _ in 0..num_actions {
            if layer >= horizon {
                rows.push(vec![(StateId(state), min_alpha0)]);
                continue;
            }
            let next = layer + 1;
            let mut targets: Vec<usize> = (layer_start(next)..layer_start(next) + layer_len(next)).collect();
            targets.extend(first_pit..n);
            // mostly safe mass, a small random weight on each pit
            let mut weights: Vec<f64> = targets
                .iter()
                .map(|&j| {
                    if j >= first_pit {
                        rng.random_range(0.02..0.25)
                    } else {
                        rng.random_range(0.5..1.5)
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            let alpha0 = min_alpha0 * rng.random_range(1.0..3.0);
            for w in &mut weights {
                *w *= alpha0 / total;
            }
            rows.push(targets.into_iter().map(StateId).zip(weights).collect());
        }
    }
    let belief = DirichletBelief::from_rows(n, num_actions, rows).expect("generated rows are valid");
    Instance {
        belief,
        obs: Observation::from_sets(StateId(0), horizon, (0..n).map(StateId), (first_pit..n).map(StateId)),
        horizon,
        state: StateId(0),
    }
}
