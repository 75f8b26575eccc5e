//! Dirichlet-Categorical beliefs over an unknown transition kernel.
//!
//! Every `(state, action)` pair carries a Dirichlet over next-state
//! probabilities. A row's support is the set of candidate successors the
//! prior assigns mass to; rows start as a shared [`PriorTemplate`] and are
//! copied into the belief only when a transition from them is observed.
//!
//! With `alpha0 = sum_k alpha_k` the row moments are
//!
//! ```text
//! mean_j    = alpha_j / alpha0
//! cov_{jk}  = alpha_j (delta_jk alpha0 - alpha_k) / (alpha0^2 (alpha0 + 1))
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};
use crate::mdp::{ActionId, StateId, TransitionModel};

/// Concentration given to the intended successor by the named priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NamedPrior {
    /// Every alpha equal to 1.
    Uninformative,
    /// 12 on the intended successor, 1 elsewhere.
    WeaklyInformative,
    /// 96 on the intended successor, 1 elsewhere.
    HighlyInformative,
    /// `weight` on the intended successor, `base` elsewhere.
    Intended { weight: f64, base: f64 },
}

impl NamedPrior {
    pub fn intended_weight(&self) -> f64 {
        match self {
            NamedPrior::Uninformative => 1.0,
            NamedPrior::WeaklyInformative => 12.0,
            NamedPrior::HighlyInformative => 96.0,
            NamedPrior::Intended { weight, .. } => *weight,
        }
    }

    pub fn base_weight(&self) -> f64 {
        match self {
            NamedPrior::Intended { base, .. } => *base,
            _ => 1.0,
        }
    }
}

/// Possible outcomes of every `(state, action)` pair as declared by an
/// environment, one entry per movement outcome. Outcomes may repeat (moves
/// blocked by a wall all land on the current cell); the prior adds up their
/// weights. `intended` indexes the outcome the action aims for.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessorTable {
    num_states: usize,
    num_actions: usize,
    outcomes: Vec<Vec<StateId>>,
    intended: Vec<Option<usize>>,
}

impl SuccessorTable {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            outcomes: vec![Vec::new(); num_states * num_actions],
            intended: vec![None; num_states * num_actions],
        }
    }

    pub fn set(&mut self, s: StateId, a: ActionId, outcomes: Vec<StateId>, intended: Option<usize>) {
        if let Some(i) = intended {
            assert!(i < outcomes.len(), "intended outcome index out of range");
        }
        let idx = s.0 * self.num_actions + a.0;
        self.outcomes[idx] = outcomes;
        self.intended[idx] = intended;
    }

    pub fn outcomes(&self, s: StateId, a: ActionId) -> &[StateId] {
        &self.outcomes[s.0 * self.num_actions + a.0]
    }

    /// Distinct candidate successors, sorted.
    pub fn candidates(&self, s: StateId, a: ActionId) -> Vec<StateId> {
        let mut c = self.outcomes(s, a).to_vec();
        c.sort();
        c.dedup();
        c
    }

    pub fn intended(&self, s: StateId, a: ActionId) -> Option<StateId> {
        let idx = s.0 * self.num_actions + a.0;
        self.intended[idx].map(|i| self.outcomes[idx][i])
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

#[derive(Debug, Clone, PartialEq)]
struct PriorRow {
    support: Vec<StateId>,
    alpha: Vec<f64>,
    alpha0: f64,
}

impl PriorRow {
    fn new(state: usize, action: usize, mut entries: Vec<(StateId, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        let invalid = |reason: String| Error::InvalidConcentration {
            state,
            action,
            reason,
        };
        if entries.is_empty() {
            return Err(invalid("empty support".into()));
        }
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(invalid(format!("duplicate successor {}", w[0].0 .0)));
            }
        }
        if let Some((j, a)) = entries.iter().find(|(_, a)| !(a.is_finite() && *a > 0.0)) {
            return Err(invalid(format!("alpha {a} for successor {} is not positive", j.0)));
        }
        let alpha0 = entries.iter().map(|e| e.1).sum();
        Ok(Self {
            support: entries.iter().map(|e| e.0).collect(),
            alpha: entries.iter().map(|e| e.1).collect(),
            alpha0,
        })
    }
}

/// Prior concentrations for every row, shared between training runs.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTemplate {
    num_states: usize,
    num_actions: usize,
    rows: Vec<PriorRow>,
}

impl PriorTemplate {
    /// Explicit concentrations, `rows[s * num_actions + a]`.
    pub fn from_rows(
        num_states: usize,
        num_actions: usize,
        rows: Vec<Vec<(StateId, f64)>>,
    ) -> Result<Self> {
        if rows.len() != num_states * num_actions {
            return Err(precondition(format!(
                "expected {} prior rows, got {}",
                num_states * num_actions,
                rows.len()
            )));
        }
        let rows = rows
            .into_iter()
            .enumerate()
            .map(|(idx, entries)| {
                if let Some((j, _)) = entries.iter().find(|(j, _)| j.0 >= num_states) {
                    return Err(Error::StateOutOfRange {
                        index: j.0,
                        len: num_states,
                    });
                }
                PriorRow::new(idx / num_actions, idx % num_actions, entries)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            num_states,
            num_actions,
            rows,
        })
    }

    /// A named prior over an environment's declared outcomes: the intended
    /// outcome gets the prior's intended weight, every other outcome the base
    /// weight, and repeated outcomes accumulate.
    pub fn from_successors(table: &SuccessorTable, prior: NamedPrior) -> Result<Self> {
        let (weight, base) = (prior.intended_weight(), prior.base_weight());
        let mut rows = Vec::with_capacity(table.num_states * table.num_actions);
        for (idx, outcomes) in table.outcomes.iter().enumerate() {
            let intended = table.intended[idx];
            let mut row: Vec<(StateId, f64)> = Vec::with_capacity(outcomes.len());
            for (k, &j) in outcomes.iter().enumerate() {
                let w = if Some(k) == intended { weight } else { base };
                match row.iter_mut().find(|e| e.0 == j) {
                    Some(e) => e.1 += w,
                    None => row.push((j, w)),
                }
            }
            rows.push(row);
        }
        Self::from_rows(table.num_states, table.num_actions, rows)
    }

    /// The same concentration `alpha` on every next state of every row.
    pub fn full_support(num_states: usize, num_actions: usize, alpha: f64) -> Result<Self> {
        let row: Vec<(StateId, f64)> = (0..num_states).map(|j| (StateId(j), alpha)).collect();
        Self::from_rows(num_states, num_actions, vec![row; num_states * num_actions])
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BeliefRow {
    support: Vec<StateId>,
    alpha: Vec<f64>,
    counts: Vec<u64>,
    alpha0: f64,
}

/// Borrowed view of one row's concentrations.
#[derive(Debug, Clone, Copy)]
pub struct RowView<'a> {
    pub support: &'a [StateId],
    pub alpha: &'a [f64],
    pub alpha0: f64,
}

impl RowView<'_> {
    pub fn iter(&self) -> impl Iterator<Item = (StateId, f64)> + '_ {
        self.support.iter().copied().zip(self.alpha.iter().copied())
    }

    fn position(&self, j: StateId) -> Option<usize> {
        self.support.binary_search(&j).ok()
    }
}

/// The agent's Dirichlet belief about every transition row.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletBelief {
    template: Arc<PriorTemplate>,
    rows: Vec<Option<BeliefRow>>,
}

impl DirichletBelief {
    pub fn new(template: Arc<PriorTemplate>) -> Self {
        let rows = vec![None; template.num_states * template.num_actions];
        Self { template, rows }
    }

    /// Belief with explicit concentrations (no shared template).
    pub fn from_rows(
        num_states: usize,
        num_actions: usize,
        rows: Vec<Vec<(StateId, f64)>>,
    ) -> Result<Self> {
        Ok(Self::new(Arc::new(PriorTemplate::from_rows(
            num_states,
            num_actions,
            rows,
        )?)))
    }

    pub fn num_states(&self) -> usize {
        self.template.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.template.num_actions
    }

    pub fn template(&self) -> &Arc<PriorTemplate> {
        &self.template
    }

    #[inline]
    fn index(&self, s: StateId, a: ActionId) -> usize {
        s.0 * self.template.num_actions + a.0
    }

    fn check(&self, s: StateId, a: ActionId) -> Result<()> {
        if s.0 >= self.num_states() {
            return Err(Error::StateOutOfRange {
                index: s.0,
                len: self.num_states(),
            });
        }
        if a.0 >= self.num_actions() {
            return Err(Error::ActionOutOfRange {
                index: a.0,
                len: self.num_actions(),
            });
        }
        Ok(())
    }

    /// Current concentrations of row `(s, a)`.
    pub fn row(&self, s: StateId, a: ActionId) -> RowView<'_> {
        let idx = self.index(s, a);
        match &self.rows[idx] {
            Some(row) => RowView {
                support: &row.support,
                alpha: &row.alpha,
                alpha0: row.alpha0,
            },
            None => {
                let row = &self.template.rows[idx];
                RowView {
                    support: &row.support,
                    alpha: &row.alpha,
                    alpha0: row.alpha0,
                }
            }
        }
    }

    /// `alpha^{s,j}_a`, zero outside the support.
    pub fn alpha(&self, s: StateId, a: ActionId, j: StateId) -> f64 {
        let row = self.row(s, a);
        row.position(j).map(|p| row.alpha[p]).unwrap_or(0.0)
    }

    /// Observed transition counts of row `(s, a)` over its support.
    pub fn counts(&self, s: StateId, a: ActionId) -> Vec<(StateId, u64)> {
        match &self.rows[self.index(s, a)] {
            Some(row) => row.support.iter().copied().zip(row.counts.iter().copied()).collect(),
            None => Vec::new(),
        }
    }

    /// Number of rows that have seen at least one transition.
    pub fn touched_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }

    /// Conjugate update for an observed transition `s --a--> next`.
    ///
    /// A successor outside the prior support joins the row with prior mass 0,
    /// so its concentration equals its count.
    pub fn update(&mut self, s: StateId, a: ActionId, next: StateId) -> Result<()> {
        self.check(s, a)?;
        if next.0 >= self.num_states() {
            return Err(Error::StateOutOfRange {
                index: next.0,
                len: self.num_states(),
            });
        }
        let idx = self.index(s, a);
        let template = &self.template;
        let row = self.rows[idx].get_or_insert_with(|| {
            let prior = &template.rows[idx];
            BeliefRow {
                support: prior.support.clone(),
                alpha: prior.alpha.clone(),
                counts: vec![0; prior.support.len()],
                alpha0: prior.alpha0,
            }
        });
        let pos = match row.support.binary_search(&next) {
            Ok(p) => p,
            Err(p) => {
                row.support.insert(p, next);
                row.alpha.insert(p, 0.0);
                row.counts.insert(p, 0);
                p
            }
        };
        row.alpha[pos] += 1.0;
        row.counts[pos] += 1;
        row.alpha0 += 1.0;
        Ok(())
    }

    /// Like [`update`](Self::update) but consuming and returning the belief.
    pub fn updated(mut self, s: StateId, a: ActionId, next: StateId) -> Result<Self> {
        self.update(s, a, next)?;
        Ok(self)
    }

    /// Adds `count` observations of `s --a--> next` at once.
    pub fn update_many(&mut self, s: StateId, a: ActionId, next: StateId, count: u64) -> Result<()> {
        for _ in 0..count {
            self.update(s, a, next)?;
        }
        Ok(())
    }

    pub fn moments(&self) -> BeliefMoments<'_> {
        BeliefMoments { belief: self }
    }

    /// Sparse snapshot listing only rows that have seen data.
    pub fn snapshot(&self) -> BeliefSnapshot {
        let m = self.num_actions();
        let rows = self
            .rows
            .iter()
            .enumerate()
            .filter_map(|(idx, row)| {
                row.as_ref().map(|row| SnapshotRow {
                    state: StateId(idx / m),
                    action: ActionId(idx % m),
                    support: row.support.clone(),
                    alpha: row.alpha.clone(),
                    counts: row.counts.clone(),
                })
            })
            .collect();
        BeliefSnapshot {
            num_states: self.num_states(),
            num_actions: m,
            rows,
        }
    }
}

/// Serializable view of a belief's touched rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefSnapshot {
    pub num_states: usize,
    pub num_actions: usize,
    pub rows: Vec<SnapshotRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub state: StateId,
    pub action: ActionId,
    pub support: Vec<StateId>,
    pub alpha: Vec<f64>,
    pub counts: Vec<u64>,
}

impl BeliefSnapshot {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// First and second moments of a belief, computed on demand per row.
#[derive(Debug, Clone, Copy)]
pub struct BeliefMoments<'a> {
    belief: &'a DirichletBelief,
}

impl<'a> BeliefMoments<'a> {
    pub fn belief(&self) -> &'a DirichletBelief {
        self.belief
    }

    /// `E[p^{s,j}_a]`.
    pub fn mean(&self, s: StateId, a: ActionId, j: StateId) -> f64 {
        let row = self.belief.row(s, a);
        row.position(j).map(|p| row.alpha[p] / row.alpha0).unwrap_or(0.0)
    }

    /// Mean row over the row's support.
    pub fn mean_row(&self, s: StateId, a: ActionId) -> Vec<(StateId, f64)> {
        let row = self.belief.row(s, a);
        row.iter().map(|(j, alpha)| (j, alpha / row.alpha0)).collect()
    }

    /// `Cov[p^{s,j}_a, p^{s,k}_a]`.
    pub fn covariance(&self, s: StateId, a: ActionId, j: StateId, k: StateId) -> f64 {
        let row = self.belief.row(s, a);
        match (row.position(j), row.position(k)) {
            (Some(pj), Some(pk)) => dirichlet_covariance(row.alpha, row.alpha0, pj, pk),
            _ => 0.0,
        }
    }

    /// Covariance matrix of row `(s, a)` over its support.
    pub fn row_covariance(&self, s: StateId, a: ActionId) -> (Vec<StateId>, Vec<Vec<f64>>) {
        let row = self.belief.row(s, a);
        let n = row.support.len();
        let cov = (0..n)
            .map(|j| {
                (0..n)
                    .map(|k| dirichlet_covariance(row.alpha, row.alpha0, j, k))
                    .collect()
            })
            .collect();
        (row.support.to_vec(), cov)
    }

    /// Concentration total `alpha^{s,0}_a`.
    pub fn alpha0(&self, s: StateId, a: ActionId) -> f64 {
        self.belief.row(s, a).alpha0
    }
}

#[inline]
fn dirichlet_covariance(alpha: &[f64], alpha0: f64, j: usize, k: usize) -> f64 {
    let delta = if j == k { alpha0 } else { 0.0 };
    alpha[j] * (delta - alpha[k]) / (alpha0 * alpha0 * (alpha0 + 1.0))
}

impl TransitionModel for BeliefMoments<'_> {
    fn num_states(&self) -> usize {
        self.belief.num_states()
    }

    fn num_actions(&self) -> usize {
        self.belief.num_actions()
    }

    fn visit_row(&self, s: StateId, a: ActionId, f: &mut dyn FnMut(StateId, f64)) {
        let row = self.belief.row(s, a);
        for (j, alpha) in row.iter() {
            f(j, alpha / row.alpha0);
        }
    }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn arb_row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.05f64..50.0, 2..8)
    }

    proptest! {
        #[test]
        fn moments_are_consistent(alpha in arb_row(), obs in prop::collection::vec(0usize..8, 0..20)) {
            let n = alpha.len();
            let row: Vec<(StateId, f64)> = alpha.iter().enumerate().map(|(j, &a)| (StateId(j), a)).collect();
            let mut rows = vec![row];
            rows.extend((1..n).map(|s| vec![(StateId(s), 1.0)]));
            let mut b = DirichletBelief::from_rows(n, 1, rows).unwrap();
            let mut counts = vec![0u64; n];
            for &o in &obs {
                let j = o % n;
                b.update(StateId(0), ActionId(0), StateId(j)).unwrap();
                counts[j] += 1;
            }
            let m = b.moments();
            let (s, a) = (StateId(0), ActionId(0));
            let prior0: f64 = alpha.iter().sum();
            prop_assert!((m.alpha0(s, a) - (prior0 + obs.len() as f64)).abs() < 1e-9);

            let mean = m.mean_row(s, a);
            let total: f64 = mean.iter().map(|e| e.1).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for (j, p) in &mean {
                let expected = (alpha[j.0] + counts[j.0] as f64) / (prior0 + obs.len() as f64);
                prop_assert!((p - expected).abs() <= 1e-12);
            }

            let (_, cov) = m.row_covariance(s, a);
            for j in 0..n {
                let row_sum: f64 = cov[j].iter().sum();
                prop_assert!(row_sum.abs() <= 1e-12);
                for k in 0..n {
                    prop_assert_eq!(cov[j][k].to_bits(), cov[k][j].to_bits());
                }
                prop_assert!(cov[j][j] >= 0.0);
            }
            // PSD: quadratic form nonnegative for a handful of directions
            for seed in 0..5u64 {
                let d: Vec<f64> = (0..n).map(|j| (((j as u64 + 1) * (seed + 3)) % 7) as f64 - 3.0).collect();
                let q: f64 = (0..n).map(|j| (0..n).map(|k| d[j] * cov[j][k] * d[k]).sum::<f64>()).sum();
                prop_assert!(q >= -1e-15);
            }
        }
    }
}
