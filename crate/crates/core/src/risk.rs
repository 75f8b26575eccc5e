//! Risk back-propagation and its first-order uncertainty.
//!
//! For a query state `s` and horizon `m` the believed risk of action `a` is
//!
//! ```text
//! rho^0(k)     = 1{k observed and unsafe}
//! rho^n(k, a)  = 1                               if k observed-unsafe
//!              = sum_j p(j | k, a) rho^{n-1}(j)  otherwise
//! rho^n(k)     = min_a rho^n(k, a)
//! ```
//!
//! evaluated at the belief means. Freezing the argmin actions turns the risk
//! into a polynomial `g^m(s, a)[x]` in the kernel entries; its gradient at the
//! means and the Dirichlet covariances give the delta-method variance.
//!
//! Only observed states take part. An unobserved successor contributes zero,
//! which is exact as long as `m` does not exceed the observation boundary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::belief::BeliefMoments;
use crate::error::{precondition, Error, Result};
use crate::mdp::{ActionId, Observation, StateId, TransitionModel};

/// Argmin actions chosen during back-propagation, frozen for the gradient.
///
/// Level `n` (1 ≤ n ≤ m) holds the action minimizing `rho^n(k, ·)` for every
/// state `k` the recursion evaluated at that level. Level `m` is only
/// populated at the query state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SafestPolicy {
    horizon: usize,
    states: Vec<StateId>,
    /// `choices[n - 1][local]`
    choices: Vec<Vec<Option<ActionId>>>,
}

impl SafestPolicy {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// The frozen action at `(level, state)`, if the recursion visited it.
    pub fn choice(&self, level: usize, s: StateId) -> Option<ActionId> {
        if level == 0 || level > self.horizon {
            return None;
        }
        let local = self.states.binary_search(&s).ok()?;
        self.choices[level - 1][local]
    }

    /// All `(level, state, action)` entries, ordered by level then state.
    pub fn entries(&self) -> impl Iterator<Item = (usize, StateId, ActionId)> + '_ {
        self.choices.iter().enumerate().flat_map(move |(n, level)| {
            level
                .iter()
                .zip(&self.states)
                .filter_map(move |(c, &s)| c.map(|a| (n + 1, s, a)))
        })
    }

    /// Builds a policy from explicit entries over the given observed states.
    pub fn from_entries(
        horizon: usize,
        states: impl IntoIterator<Item = StateId>,
        entries: impl IntoIterator<Item = (usize, StateId, ActionId)>,
    ) -> Result<Self> {
        let mut states: Vec<StateId> = states.into_iter().collect();
        states.sort();
        states.dedup();
        let mut choices = vec![vec![None; states.len()]; horizon];
        for (level, s, a) in entries {
            if level == 0 || level > horizon {
                return Err(precondition(format!(
                    "policy level {level} outside 1..={horizon}"
                )));
            }
            let local = states
                .binary_search(&s)
                .map_err(|_| precondition(format!("policy state {s} is not observed")))?;
            choices[level - 1][local] = Some(a);
        }
        Ok(Self {
            horizon,
            states,
            choices,
        })
    }
}

/// Result of back-propagating the expected risk from one state.
#[derive(Debug, Clone, PartialEq)]
pub struct Backprop {
    pub state: StateId,
    pub horizon: usize,
    /// `rho_bar^m(s, a)` for every action.
    pub rho_bar: Vec<f64>,
    pub policy: SafestPolicy,
}

/// Partial derivatives of `g^m(s, a)[x]`, grouped by kernel row.
///
/// Each row lists `(j, dg/dx^{ij}_b)` sorted by `j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RiskGradient {
    pub rows: BTreeMap<(StateId, ActionId), Vec<(StateId, f64)>>,
}

impl RiskGradient {
    /// `dg/dx^{ij}_b`, zero for untouched variables.
    pub fn get(&self, i: StateId, b: ActionId, j: StateId) -> f64 {
        self.rows
            .get(&(i, b))
            .and_then(|row| row.binary_search_by_key(&j, |e| e.0).ok().map(|p| row[p].1))
            .unwrap_or(0.0)
    }

    /// Iterates `(i, b, j, partial)` over stored entries.
    pub fn iter(&self) -> impl Iterator<Item = (StateId, ActionId, StateId, f64)> + '_ {
        self.rows
            .iter()
            .flat_map(|(&(i, b), row)| row.iter().map(move |&(j, d)| (i, b, j, d)))
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Per-action risk summary at one state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionRisk {
    pub rho_bar: f64,
    pub v_bar: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskAssessment {
    pub state: StateId,
    pub horizon: usize,
    pub confidence: f64,
    pub actions: Vec<ActionRisk>,
    pub policy: SafestPolicy,
}

/// Actions the agent may choose from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafeSet {
    pub actions: Vec<ActionId>,
    /// True when no action met the bound and the minimum-risk fallback ran.
    pub safety_mode: bool,
}

/// Observed states relevant to a query, with dense local indexing.
struct Scope {
    states: Vec<StateId>,
    local: Vec<u32>,
    observed_unsafe: Vec<bool>,
    /// Shortest believed-support distance from the query state.
    dist: Vec<usize>,
    root: usize,
}

const NOT_LOCAL: u32 = u32::MAX;

impl Scope {
    fn new<T: TransitionModel + ?Sized>(
        model: &T,
        obs: &Observation,
        m: usize,
        s: StateId,
    ) -> Result<Self> {
        let n = model.num_states();
        if m == 0 {
            return Err(precondition("risk horizon must be at least 1"));
        }
        if m > obs.boundary {
            return Err(precondition(format!(
                "risk horizon {m} exceeds observation boundary {}",
                obs.boundary
            )));
        }
        if s.0 >= n {
            return Err(Error::StateOutOfRange { index: s.0, len: n });
        }
        if !obs.is_observed(s) {
            return Err(precondition(format!("query state {s} is not observed")));
        }
        let states: Vec<StateId> = obs.observed.iter().copied().collect();
        let mut local = vec![NOT_LOCAL; n];
        for (l, k) in states.iter().enumerate() {
            if k.0 >= n {
                return Err(Error::StateOutOfRange { index: k.0, len: n });
            }
            local[k.0] = l as u32;
        }
        let observed_unsafe = states.iter().map(|&k| obs.is_observed_unsafe(k)).collect();
        let root = local[s.0] as usize;

        // Breadth-first distances over the model's support. States farther
        // than m - n from the root never influence level n.
        let mut dist = vec![usize::MAX; states.len()];
        dist[root] = 0;
        let mut frontier = vec![root];
        for d in 1..=m {
            let mut next = Vec::new();
            for &l in &frontier {
                for a in 0..model.num_actions() {
                    model.visit_row(states[l], ActionId(a), &mut |j, _| {
                        let lj = local[j.0];
                        if lj != NOT_LOCAL && dist[lj as usize] == usize::MAX {
                            dist[lj as usize] = d;
                            next.push(lj as usize);
                        }
                    });
                }
            }
            frontier = next;
        }
        Ok(Self {
            states,
            local,
            observed_unsafe,
            dist,
            root,
        })
    }

    #[inline]
    fn local(&self, j: StateId) -> Option<usize> {
        match self.local.get(j.0) {
            Some(&l) if l != NOT_LOCAL => Some(l as usize),
            _ => None,
        }
    }

    fn indicator(&self) -> Vec<f64> {
        self.observed_unsafe
            .iter()
            .map(|&u| if u { 1.0 } else { 0.0 })
            .collect()
    }

    /// Expected value of `values` after one transition from `k` under `a`.
    #[inline]
    fn expect<T: TransitionModel + ?Sized>(
        &self,
        model: &T,
        k: StateId,
        a: ActionId,
        values: &[f64],
    ) -> f64 {
        let mut acc = 0.0;
        model.visit_row(k, a, &mut |j, p| {
            if let Some(l) = self.local(j) {
                acc += p * values[l];
            }
        });
        acc
    }
}

/// Values `g^n(k)` for levels `0..m`, either minimizing over actions (and
/// recording the choices) or following a frozen policy.
fn forward<T: TransitionModel + ?Sized>(
    model: &T,
    scope: &Scope,
    m: usize,
    frozen: Option<&SafestPolicy>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Option<ActionId>>>)> {
    let size = scope.states.len();
    let mut levels = Vec::with_capacity(m);
    levels.push(scope.indicator());
    let mut choices = vec![vec![None; size]; m];
    for n in 1..m {
        let prev = &levels[n - 1];
        let mut cur = vec![0.0; size];
        for l in 0..size {
            if scope.dist[l] > m - n {
                continue;
            }
            if scope.observed_unsafe[l] {
                cur[l] = 1.0;
                continue;
            }
            let k = scope.states[l];
            match frozen {
                Some(policy) => {
                    let a = policy.choice(n, k).ok_or_else(|| {
                        precondition(format!("frozen policy has no action at level {n}, state {k}"))
                    })?;
                    cur[l] = scope.expect(model, k, a, prev);
                }
                None => {
                    let mut best = f64::INFINITY;
                    let mut best_a = ActionId(0);
                    for a in 0..model.num_actions() {
                        let v = scope.expect(model, k, ActionId(a), prev);
                        if v < best {
                            best = v;
                            best_a = ActionId(a);
                        }
                    }
                    cur[l] = best;
                    choices[n - 1][l] = Some(best_a);
                }
            }
        }
        levels.push(cur);
    }
    Ok((levels, choices))
}

fn top_level<T: TransitionModel + ?Sized>(
    model: &T,
    scope: &Scope,
    levels: &[Vec<f64>],
    a: ActionId,
) -> f64 {
    if scope.observed_unsafe[scope.root] {
        return 1.0;
    }
    scope.expect(model, scope.states[scope.root], a, &levels[levels.len() - 1])
}

/// Back-propagates the expected risk of every action at `s` over `m` steps.
pub fn risk_backprop<T: TransitionModel + ?Sized>(
    means: &T,
    obs: &Observation,
    m: usize,
    s: StateId,
) -> Result<Backprop> {
    let scope = Scope::new(means, obs, m, s)?;
    let (levels, mut choices) = forward(means, &scope, m, None)?;
    let rho_bar: Vec<f64> = (0..means.num_actions())
        .map(|a| top_level(means, &scope, &levels, ActionId(a)))
        .collect();
    let mut best = 0;
    for (a, &r) in rho_bar.iter().enumerate() {
        if r < rho_bar[best] {
            best = a;
        }
    }
    choices[m - 1][scope.root] = Some(ActionId(best));
    Ok(Backprop {
        state: s,
        horizon: m,
        rho_bar,
        policy: SafestPolicy {
            horizon: m,
            states: scope.states,
            choices,
        },
    })
}

/// Reverse-mode pass for one query action given forward values.
fn reverse<T: TransitionModel + ?Sized>(
    model: &T,
    scope: &Scope,
    levels: &[Vec<f64>],
    policy: &SafestPolicy,
    a: ActionId,
) -> Result<RiskGradient> {
    let mut grad = RiskGradient::default();
    if scope.observed_unsafe[scope.root] {
        return Ok(grad);
    }
    let m = levels.len();
    let size = scope.states.len();

    // adjoint[l] = dg^m / dg^n(states[l]) for the current level n.
    let mut adjoint = vec![0.0; size];
    let root = scope.states[scope.root];
    accumulate_row(&mut grad, model, scope, root, a, 1.0, &levels[m - 1], &mut adjoint);

    for n in (1..m).rev() {
        let mut below = vec![0.0; size];
        for l in 0..size {
            let w = adjoint[l];
            if w == 0.0 || scope.observed_unsafe[l] {
                continue;
            }
            let k = scope.states[l];
            let b = policy.choice(n, k).ok_or_else(|| {
                precondition(format!("frozen policy has no action at level {n}, state {k}"))
            })?;
            accumulate_row(&mut grad, model, scope, k, b, w, &levels[n - 1], &mut below);
        }
        adjoint = below;
    }
    Ok(grad)
}

/// Adds `w * values[j]` to `dg/dx^{kj}_b` and `w * x^{kj}_b` to the adjoint
/// of every observed successor `j`.
#[allow(clippy::too_many_arguments)]
fn accumulate_row<T: TransitionModel + ?Sized>(
    grad: &mut RiskGradient,
    model: &T,
    scope: &Scope,
    k: StateId,
    b: ActionId,
    w: f64,
    values: &[f64],
    adjoint: &mut [f64],
) {
    let row = grad.rows.entry((k, b)).or_insert_with(|| {
        let mut entries = Vec::new();
        model.visit_row(k, b, &mut |j, _| entries.push((j, 0.0)));
        entries.sort_by_key(|e| e.0);
        entries
    });
    model.visit_row(k, b, &mut |j, p| {
        if let Some(l) = scope.local(j) {
            if let Ok(pos) = row.binary_search_by_key(&j, |e| e.0) {
                row[pos].1 += w * values[l];
            }
            adjoint[l] += w * p;
        }
    });
}

/// Gradient of `g^m(s, a)[x]` at the model's values with actions frozen to
/// `policy`.
pub fn risk_gradient<T: TransitionModel + ?Sized>(
    model: &T,
    obs: &Observation,
    m: usize,
    s: StateId,
    a: ActionId,
    policy: &SafestPolicy,
) -> Result<RiskGradient> {
    if a.0 >= model.num_actions() {
        return Err(Error::ActionOutOfRange {
            index: a.0,
            len: model.num_actions(),
        });
    }
    if policy.horizon != m {
        return Err(precondition(format!(
            "policy horizon {} differs from requested horizon {m}",
            policy.horizon
        )));
    }
    let scope = Scope::new(model, obs, m, s)?;
    let (levels, _) = forward(model, &scope, m, Some(policy))?;
    reverse(model, &scope, &levels, policy, a)
}

/// Delta-method variance `sum_rows d^T Cov d` of a gradient under a belief.
///
/// Per row, with `dbar = sum_j alpha_j d_j / alpha0`, the quadratic form
/// equals `sum_j alpha_j (d_j - dbar)^2 / (alpha0 (alpha0 + 1))`, which is
/// nonnegative by construction.
pub fn variance_approx(grad: &RiskGradient, moments: &BeliefMoments<'_>) -> f64 {
    let belief = moments.belief();
    let mut total = 0.0;
    for (&(i, b), entries) in &grad.rows {
        let row = belief.row(i, b);
        let d = |j: StateId| {
            entries
                .binary_search_by_key(&j, |e| e.0)
                .map(|p| entries[p].1)
                .unwrap_or(0.0)
        };
        let dbar: f64 = row.iter().map(|(j, alpha)| alpha * d(j)).sum::<f64>() / row.alpha0;
        let spread: f64 = row
            .iter()
            .map(|(j, alpha)| {
                let c = d(j) - dbar;
                alpha * c * c
            })
            .sum();
        total += spread / (row.alpha0 * (row.alpha0 + 1.0));
    }
    total
}

/// One-sided Cantelli bound: with confidence at least `c` the believed risk
/// does not exceed the returned value.
pub fn cantelli_phi(rho_bar: f64, v_bar: f64, c: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&c) {
        return Err(precondition(format!("confidence {c} outside [0, 1)")));
    }
    if !(v_bar >= 0.0) || !v_bar.is_finite() {
        return Err(precondition(format!("variance {v_bar} is not a nonnegative number")));
    }
    Ok(rho_bar + (v_bar * c / (1.0 - c)).sqrt())
}

/// Full assessment of every action at `s`: expected risk, variance and bound.
pub fn assess(
    moments: &BeliefMoments<'_>,
    obs: &Observation,
    m: usize,
    s: StateId,
    confidence: f64,
) -> Result<RiskAssessment> {
    let bp = risk_backprop(moments, obs, m, s)?;
    let scope = Scope::new(moments, obs, m, s)?;
    let (levels, _) = forward(moments, &scope, m, Some(&bp.policy))?;
    let mut actions = Vec::with_capacity(bp.rho_bar.len());
    for (a, &rho_bar) in bp.rho_bar.iter().enumerate() {
        let grad = reverse(moments, &scope, &levels, &bp.policy, ActionId(a))?;
        let v_bar = variance_approx(&grad, moments);
        actions.push(ActionRisk {
            rho_bar,
            v_bar,
            phi: cantelli_phi(rho_bar, v_bar, confidence)?,
        });
    }
    Ok(RiskAssessment {
        state: s,
        horizon: m,
        confidence,
        actions,
        policy: bp.policy,
    })
}

/// Actions whose bound is within `phi_max`, or the minimum-expected-risk
/// actions when none is.
pub fn safe_action_set(assessment: &RiskAssessment, phi_max: f64) -> SafeSet {
    let within: Vec<ActionId> = assessment
        .actions
        .iter()
        .enumerate()
        .filter(|(_, r)| r.phi <= phi_max)
        .map(|(a, _)| ActionId(a))
        .collect();
    if !within.is_empty() {
        return SafeSet {
            actions: within,
            safety_mode: false,
        };
    }
    let min = assessment
        .actions
        .iter()
        .map(|r| r.rho_bar)
        .fold(f64::INFINITY, f64::min);
    SafeSet {
        actions: assessment
            .actions
            .iter()
            .enumerate()
            .filter(|(_, r)| r.rho_bar == min)
            .map(|(a, _)| ActionId(a))
            .collect(),
        safety_mode: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::DirichletBelief;

    fn sid(i: usize) -> StateId {
        StateId(i)
    }

    /// States 0..n with the given rows for one action; every other row is a
    /// self-loop.
    fn belief(n: usize, num_actions: usize, rows: &[((usize, usize), Vec<(usize, f64)>)]) -> DirichletBelief {
        let mut all = Vec::new();
        for s in 0..n {
            for a in 0..num_actions {
                let row = rows
                    .iter()
                    .find(|(key, _)| *key == (s, a))
                    .map(|(_, r)| r.iter().map(|&(j, w)| (sid(j), w)).collect())
                    .unwrap_or_else(|| vec![(sid(s), 1.0)]);
                all.push(row);
            }
        }
        DirichletBelief::from_rows(n, num_actions, all).unwrap()
    }

    fn obs_all(n: usize, center: usize, boundary: usize, unsafe_: &[usize]) -> Observation {
        Observation::from_sets(
            sid(center),
            boundary,
            (0..n).map(sid),
            unsafe_.iter().copied().map(sid),
        )
    }

    #[test]
    fn unsafe_query_state_has_risk_one() {
        let b = belief(2, 2, &[]);
        let obs = obs_all(2, 1, 3, &[1]);
        for m in 1..=3 {
            let bp = risk_backprop(&b.moments(), &obs, m, sid(1)).unwrap();
            assert_eq!(bp.rho_bar, vec![1.0, 1.0]);
            let g = risk_gradient(&b.moments(), &obs, m, sid(1), ActionId(0), &bp.policy).unwrap();
            assert!(g.is_empty());
        }
    }

    #[test]
    fn one_step_risk_is_unsafe_mass() {
        // 9:1 split between a safe and an unsafe successor
        let b = belief(3, 1, &[((0, 0), vec![(1, 9.0), (2, 1.0)])]);
        let obs = obs_all(3, 0, 1, &[2]);
        let bp = risk_backprop(&b.moments(), &obs, 1, sid(0)).unwrap();
        assert!((bp.rho_bar[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn linear_gradient_is_indicator() {
        let b = belief(3, 1, &[((0, 0), vec![(0, 1.0), (1, 2.0), (2, 3.0)])]);
        let obs = obs_all(3, 0, 1, &[2]);
        let bp = risk_backprop(&b.moments(), &obs, 1, sid(0)).unwrap();
        let g = risk_gradient(&b.moments(), &obs, 1, sid(0), ActionId(0), &bp.policy).unwrap();
        assert_eq!(g.get(sid(0), ActionId(0), sid(0)), 0.0);
        assert_eq!(g.get(sid(0), ActionId(0), sid(1)), 0.0);
        assert_eq!(g.get(sid(0), ActionId(0), sid(2)), 1.0);
    }

    #[test]
    fn two_step_chain_matches_hand_expansion() {
        // 0 -a-> {1, 2}; from 1 the actions reach the pit 3 with different mass
        let b = belief(
            4,
            2,
            &[
                ((0, 0), vec![(1, 3.0), (2, 1.0)]),
                ((0, 1), vec![(1, 1.0), (3, 1.0)]),
                ((1, 0), vec![(1, 4.0), (3, 1.0)]),
                ((1, 1), vec![(2, 9.0), (3, 1.0)]),
            ],
        );
        let obs = obs_all(4, 0, 2, &[3]);
        let bp = risk_backprop(&b.moments(), &obs, 2, sid(0)).unwrap();
        // min over actions at state 1: 0.2 vs 0.1 -> action 1
        let expected_a0 = 0.75 * 0.1 + 0.25 * 0.0;
        let expected_a1 = 0.5 * 0.1 + 0.5 * 1.0;
        assert!((bp.rho_bar[0] - expected_a0).abs() < 1e-15);
        assert!((bp.rho_bar[1] - expected_a1).abs() < 1e-15);
        assert_eq!(bp.policy.choice(1, sid(1)), Some(ActionId(1)));
        assert_eq!(bp.policy.choice(2, sid(0)), Some(ActionId(0)));
    }

    #[test]
    fn unused_variables_have_zero_gradient() {
        let b = belief(
            4,
            2,
            &[
                ((0, 0), vec![(1, 3.0), (2, 1.0)]),
                ((1, 0), vec![(1, 4.0), (3, 1.0)]),
                ((1, 1), vec![(2, 9.0), (3, 1.0)]),
            ],
        );
        let obs = obs_all(4, 0, 2, &[3]);
        let bp = risk_backprop(&b.moments(), &obs, 2, sid(0)).unwrap();
        let g = risk_gradient(&b.moments(), &obs, 2, sid(0), ActionId(0), &bp.policy).unwrap();
        // action 0 at state 1 is not the frozen choice
        for j in 0..4 {
            assert_eq!(g.get(sid(1), ActionId(0), sid(j)), 0.0);
        }
        assert_eq!(g.get(sid(1), ActionId(1), sid(3)), 0.75);
        assert_eq!(g.get(sid(0), ActionId(0), sid(1)), 0.1);
    }

    #[test]
    fn frozen_policy_missing_entry_is_rejected() {
        let b = belief(3, 2, &[((0, 0), vec![(1, 1.0), (2, 1.0)])]);
        let obs = obs_all(3, 0, 2, &[2]);
        let empty = SafestPolicy::from_entries(2, (0..3).map(sid), []).unwrap();
        let err = risk_gradient(&b.moments(), &obs, 2, sid(0), ActionId(0), &empty).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn horizon_beyond_boundary_is_rejected() {
        let b = belief(2, 1, &[]);
        let obs = obs_all(2, 0, 1, &[]);
        assert!(risk_backprop(&b.moments(), &obs, 2, sid(0)).is_err());
        assert!(risk_backprop(&b.moments(), &obs, 0, sid(0)).is_err());
    }

    #[test]
    fn m1_variance_is_beta_variance() {
        let b = belief(4, 1, &[((0, 0), vec![(1, 2.0), (2, 3.0), (3, 5.0)])]);
        let obs = obs_all(4, 0, 1, &[2, 3]);
        let moments = b.moments();
        let a = assess(&moments, &obs, 1, sid(0), 0.5).unwrap();
        // unsafe mass ~ Beta(8, 2)
        let expected = 8.0 * 2.0 / (100.0 * 11.0);
        assert!((a.actions[0].v_bar - expected).abs() < 1e-17);
    }

    #[test]
    fn zero_gradient_has_zero_variance() {
        let b = belief(2, 1, &[]);
        assert_eq!(variance_approx(&RiskGradient::default(), &b.moments()), 0.0);
    }

    #[test]
    fn cantelli_examples() {
        assert_eq!(cantelli_phi(0.3, 0.5, 0.0).unwrap(), 0.3);
        assert!((cantelli_phi(0.1, 0.04, 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert!(cantelli_phi(0.1, 0.04, 1.0).is_err());
        assert!(cantelli_phi(0.1, -0.04, 0.5).is_err());
    }

    fn assessment(values: &[(f64, f64)]) -> RiskAssessment {
        RiskAssessment {
            state: sid(0),
            horizon: 1,
            confidence: 0.0,
            actions: values
                .iter()
                .map(|&(rho_bar, phi)| ActionRisk {
                    rho_bar,
                    v_bar: 0.0,
                    phi,
                })
                .collect(),
            policy: SafestPolicy::from_entries(1, [sid(0)], []).unwrap(),
        }
    }

    #[test]
    fn safe_set_and_fallback() {
        let all = safe_action_set(&assessment(&[(0.0, 0.1), (0.0, 0.2)]), 0.5);
        assert_eq!(all.actions, vec![ActionId(0), ActionId(1)]);
        assert!(!all.safety_mode);

        let single = safe_action_set(&assessment(&[(0.3, 0.6), (0.2, 0.7), (0.4, 0.9)]), 0.5);
        assert_eq!(single.actions, vec![ActionId(1)]);
        assert!(single.safety_mode);
    }

    #[test]
    fn symmetric_rows_tie_in_safety_mode() {
        // actions 0 and 2 reach the pit with identical believed mass
        let b = belief(
            3,
            3,
            &[
                ((0, 0), vec![(1, 3.0), (2, 1.0)]),
                ((0, 1), vec![(1, 1.0), (2, 1.0)]),
                ((0, 2), vec![(1, 3.0), (2, 1.0)]),
            ],
        );
        let obs = obs_all(3, 0, 1, &[2]);
        let a = assess(&b.moments(), &obs, 1, sid(0), 0.9).unwrap();
        assert_eq!(a.actions[0].rho_bar.to_bits(), a.actions[2].rho_bar.to_bits());
        let set = safe_action_set(&a, 0.01);
        assert!(set.safety_mode);
        assert_eq!(set.actions, vec![ActionId(0), ActionId(2)]);
        // the frozen policy still picks one action
        assert_eq!(a.policy.choice(1, sid(0)), Some(ActionId(0)));
    }

    #[test]
    fn safe_region_has_zero_risk() {
        let b = belief(3, 2, &[((0, 0), vec![(0, 1.0), (1, 1.0)])]);
        let obs = obs_all(3, 0, 2, &[]);
        let a = assess(&b.moments(), &obs, 2, sid(0), 0.9).unwrap();
        for r in &a.actions {
            assert_eq!((r.rho_bar, r.v_bar, r.phi), (0.0, 0.0, 0.0));
        }
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use crate::belief::DirichletBelief;
    use proptest::prelude::*;

    /// Random belief over `n` states and `k` actions with full support rows,
    /// plus a random unsafe set.
    fn arb_instance() -> impl Strategy<Value = (DirichletBelief, Vec<bool>, usize)> {
        (2usize..7, 1usize..4).prop_flat_map(|(n, k)| {
            (
                prop::collection::vec(prop::collection::vec(0.1f64..20.0, n), n * k),
                prop::collection::vec(any::<bool>(), n),
                Just(k),
            )
                .prop_map(move |(rows, mut unsafe_, k)| {
                    unsafe_[0] = false;
                    let rows = rows
                        .into_iter()
                        .map(|r| r.into_iter().enumerate().map(|(j, a)| (StateId(j), a)).collect())
                        .collect();
                    (DirichletBelief::from_rows(n, k, rows).unwrap(), unsafe_, k)
                })
        })
    }

    fn observation(unsafe_: &[bool], boundary: usize) -> Observation {
        let n = unsafe_.len();
        Observation::from_sets(
            StateId(0),
            boundary,
            (0..n).map(StateId),
            (0..n).filter(|&j| unsafe_[j]).map(StateId),
        )
    }

    proptest! {
        #[test]
        fn risk_is_a_probability_and_gradient_nonnegative((b, unsafe_, k) in arb_instance(), m in 1usize..4) {
            let obs = observation(&unsafe_, 3);
            let moments = b.moments();
            let bp = risk_backprop(&moments, &obs, m, StateId(0)).unwrap();
            for a in 0..k {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&bp.rho_bar[a]));
                let g = risk_gradient(&moments, &obs, m, StateId(0), ActionId(a), &bp.policy).unwrap();
                for (_, _, _, d) in g.iter() {
                    prop_assert!(d >= 0.0);
                }
            }
        }

        #[test]
        fn risk_grows_with_horizon((b, unsafe_, k) in arb_instance(), m in 2usize..4) {
            let obs = observation(&unsafe_, 3);
            let moments = b.moments();
            let long = risk_backprop(&moments, &obs, m, StateId(0)).unwrap();
            let short = risk_backprop(&moments, &obs, m - 1, StateId(0)).unwrap();
            for a in 0..k {
                prop_assert!(long.rho_bar[a] >= short.rho_bar[a] - 1e-12);
            }
        }

        #[test]
        fn assessment_invariants((b, unsafe_, _k) in arb_instance(), m in 1usize..4, c in 0.0f64..0.999) {
            let obs = observation(&unsafe_, 3);
            let a = assess(&b.moments(), &obs, m, StateId(0), c).unwrap();
            for r in &a.actions {
                prop_assert!(r.v_bar >= 0.0);
                prop_assert!(r.phi >= r.rho_bar);
            }
        }

        #[test]
        fn phi_monotone_in_confidence(rho in 0.0f64..1.0, v in 0.0f64..1.0, c1 in 0.0f64..0.999, c2 in 0.0f64..0.999) {
            let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            prop_assert!(cantelli_phi(rho, v, lo).unwrap() <= cantelli_phi(rho, v, hi).unwrap());
        }

        #[test]
        fn zero_confidence_filter_is_rho_threshold((b, unsafe_, _k) in arb_instance(), m in 1usize..4, phi_max in 0.0f64..1.0) {
            let obs = observation(&unsafe_, 3);
            let a = assess(&b.moments(), &obs, m, StateId(0), 0.0).unwrap();
            let set = safe_action_set(&a, phi_max);
            let direct: Vec<ActionId> = a.actions.iter().enumerate()
                .filter(|(_, r)| r.rho_bar <= phi_max).map(|(i, _)| ActionId(i)).collect();
            if !direct.is_empty() {
                prop_assert_eq!(set.actions, direct);
            } else {
                prop_assert!(set.safety_mode);
            }
        }
    }
}
