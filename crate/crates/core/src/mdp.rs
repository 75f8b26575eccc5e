//! Ground-truth tabular MDPs: sparse transition kernels, unsafe labels,
//! episode dynamics and the observation-boundary visibility model.
//!
//! Kernels are stored row-sparse. Each `(state, action)` row keeps only its
//! nonzero successors, sorted by state index, so that benchmarks with a few
//! thousand states stay small while still behaving like the dense
//! `N x M x N` array they represent.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Error, Result};

/// Tolerance on kernel row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Dense index of a state in `[0, N)`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct StateId(pub usize);

/// Dense index of an action in `[0, M)`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ActionId(pub usize);

impl StateId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl ActionId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.0)
    }
}

/// Anything that can hand out transition rows: the true kernel, belief
/// means, sampled kernels, perturbed kernels in tests.
pub trait TransitionModel {
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Calls `f(successor, probability)` for every stored entry of row `(s, a)`.
    fn visit_row(&self, s: StateId, a: ActionId, f: &mut dyn FnMut(StateId, f64));
}

/// One sparse kernel row. Entries are strictly positive and sorted by state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KernelRow {
    next: Vec<StateId>,
    prob: Vec<f64>,
}

impl KernelRow {
    /// Aggregates duplicate successors, drops zero entries and validates that
    /// the result is a probability vector.
    fn from_entries(
        state: usize,
        action: usize,
        num_states: usize,
        mut entries: Vec<(StateId, f64)>,
    ) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidKernelRow {
            state,
            action,
            reason,
        };
        entries.sort_by_key(|(s, _)| *s);
        let mut next = Vec::with_capacity(entries.len());
        let mut prob: Vec<f64> = Vec::with_capacity(entries.len());
        for (s, p) in entries {
            if s.0 >= num_states {
                return Err(invalid(format!("successor {} out of range", s.0)));
            }
            if !p.is_finite() || p < 0.0 {
                return Err(invalid(format!("entry {p} for successor {} is not a probability", s.0)));
            }
            if p == 0.0 {
                continue;
            }
            match next.last() {
                Some(&last) if last == s => *prob.last_mut().unwrap() += p,
                _ => {
                    next.push(s);
                    prob.push(p);
                }
            }
        }
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(invalid(format!("row sums to {total}")));
        }
        Ok(Self { next, prob })
    }

    pub fn successors(&self) -> &[StateId] {
        &self.next
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.prob
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateId, f64)> + '_ {
        self.next.iter().copied().zip(self.prob.iter().copied())
    }

    pub fn probability_of(&self, s: StateId) -> f64 {
        self.next
            .binary_search(&s)
            .map(|i| self.prob[i])
            .unwrap_or(0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StateId {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, p) in self.iter() {
            acc += p;
            if u < acc {
                return s;
            }
        }
        // Rounding can leave the cumulative sum a hair below one.
        *self.next.last().expect("validated rows are nonempty")
    }
}

/// Optional grid geometry attached to an MDP so that states can be mapped
/// back to cells (visitation maps, layout descriptions).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMetadata {
    pub kind: String,
    pub width: usize,
    pub height: usize,
    /// `(x, y)` cell of the agent for every state, `y = 0` being the bottom row.
    pub positions: Vec<(usize, usize)>,
}

/// A finite MDP with a known (to the simulator) transition kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    rows: Vec<KernelRow>,
    unsafe_states: Vec<bool>,
    goal_states: Vec<bool>,
    entry_reward: Vec<f64>,
    initial_state: StateId,
    metadata: Option<GridMetadata>,
}

impl TabularMdp {
    /// Builds an MDP from per-`(state, action)` successor lists, indexed
    /// `kernel[state][action]`. No state is unsafe, no state is a goal and
    /// every reward is zero until configured otherwise.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        kernel: Vec<Vec<Vec<(StateId, f64)>>>,
        initial_state: StateId,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(precondition("an MDP needs at least one state and one action"));
        }
        if kernel.len() != num_states {
            return Err(precondition(format!(
                "kernel has {} state rows, expected {num_states}",
                kernel.len()
            )));
        }
        check_state(initial_state, num_states)?;
        let mut rows = Vec::with_capacity(num_states * num_actions);
        for (i, per_action) in kernel.into_iter().enumerate() {
            if per_action.len() != num_actions {
                return Err(precondition(format!(
                    "state {i} has {} action rows, expected {num_actions}",
                    per_action.len()
                )));
            }
            for (b, entries) in per_action.into_iter().enumerate() {
                rows.push(KernelRow::from_entries(i, b, num_states, entries)?);
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            rows,
            unsafe_states: vec![false; num_states],
            goal_states: vec![false; num_states],
            entry_reward: vec![0.0; num_states],
            initial_state,
            metadata: None,
        })
    }

    /// Labels the given states unsafe (entering one ends an episode in failure).
    pub fn with_unsafe(mut self, states: impl IntoIterator<Item = StateId>) -> Result<Self> {
        for s in states {
            check_state(s, self.num_states)?;
            self.unsafe_states[s.0] = true;
        }
        if self.unsafe_states[self.initial_state.0] {
            return Err(Error::UnsafeInitialState(self.initial_state.0));
        }
        Ok(self)
    }

    /// Labels the given states as successful terminals.
    pub fn with_goals(mut self, states: impl IntoIterator<Item = StateId>) -> Result<Self> {
        for s in states {
            check_state(s, self.num_states)?;
            self.goal_states[s.0] = true;
        }
        Ok(self)
    }

    /// Sets the reward received on entering `s`.
    pub fn with_entry_reward(mut self, s: StateId, reward: f64) -> Result<Self> {
        check_state(s, self.num_states)?;
        if !reward.is_finite() {
            return Err(precondition("rewards must be finite"));
        }
        self.entry_reward[s.0] = reward;
        Ok(self)
    }

    pub fn with_metadata(mut self, metadata: GridMetadata) -> Self {
        self.metadata = Some(metadata);
        self
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn initial_state(&self) -> StateId {
        self.initial_state
    }

    pub fn metadata(&self) -> Option<&GridMetadata> {
        self.metadata.as_ref()
    }

    pub fn is_unsafe(&self, s: StateId) -> bool {
        self.unsafe_states[s.0]
    }

    pub fn is_goal(&self, s: StateId) -> bool {
        self.goal_states[s.0]
    }

    /// True for states at which an episode ends.
    pub fn is_terminal(&self, s: StateId) -> bool {
        self.unsafe_states[s.0] || self.goal_states[s.0]
    }

    pub fn unsafe_states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.unsafe_states
            .iter()
            .enumerate()
            .filter(|(_, &u)| u)
            .map(|(i, _)| StateId(i))
    }

    pub fn goal_states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.goal_states
            .iter()
            .enumerate()
            .filter(|(_, &g)| g)
            .map(|(i, _)| StateId(i))
    }

    pub fn entry_reward(&self, s: StateId) -> f64 {
        self.entry_reward[s.0]
    }

    /// The true kernel row `t^{s, .}_a`.
    pub fn row(&self, s: StateId, a: ActionId) -> &KernelRow {
        &self.rows[s.0 * self.num_actions + a.0]
    }

    pub fn transition_probability(&self, s: StateId, a: ActionId, next: StateId) -> f64 {
        self.row(s, a).probability_of(next)
    }

    pub fn check_state(&self, s: StateId) -> Result<()> {
        check_state(s, self.num_states)
    }

    pub fn check_action(&self, a: ActionId) -> Result<()> {
        if a.0 >= self.num_actions {
            return Err(Error::ActionOutOfRange {
                index: a.0,
                len: self.num_actions,
            });
        }
        Ok(())
    }

    /// Samples one environment transition. The reward is the entry reward
    /// of the successor.
    pub fn step<R: Rng + ?Sized>(
        &self,
        s: StateId,
        a: ActionId,
        rng: &mut R,
    ) -> Result<(StateId, f64)> {
        self.check_state(s)?;
        self.check_action(a)?;
        let next = self.row(s, a).sample(rng);
        Ok((next, self.entry_reward[next.0]))
    }

    /// States visible from `s`: everything reachable in at most `boundary`
    /// transitions of nonzero true probability, under any actions.
    pub fn observe(&self, s: StateId, boundary: usize) -> Result<Observation> {
        self.check_state(s)?;
        if boundary == 0 {
            return Err(precondition("observation boundary must be at least 1"));
        }
        let mut depth = vec![usize::MAX; self.num_states];
        let mut queue = VecDeque::new();
        depth[s.0] = 0;
        queue.push_back(s);
        let mut observed = BTreeSet::new();
        while let Some(k) = queue.pop_front() {
            observed.insert(k);
            let d = depth[k.0];
            if d == boundary {
                continue;
            }
            for b in 0..self.num_actions {
                for &j in self.row(k, ActionId(b)).successors() {
                    if depth[j.0] == usize::MAX {
                        depth[j.0] = d + 1;
                        queue.push_back(j);
                    }
                }
            }
        }
        let observed_unsafe = observed
            .iter()
            .copied()
            .filter(|k| self.unsafe_states[k.0])
            .collect();
        Ok(Observation {
            center: s,
            boundary,
            observed,
            observed_unsafe,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MdpDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MdpDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

impl TransitionModel for TabularMdp {
    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn visit_row(&self, s: StateId, a: ActionId, f: &mut dyn FnMut(StateId, f64)) {
        for (j, p) in self.row(s, a).iter() {
            f(j, p);
        }
    }
}

fn check_state(s: StateId, num_states: usize) -> Result<()> {
    if s.0 >= num_states {
        return Err(Error::StateOutOfRange {
            index: s.0,
            len: num_states,
        });
    }
    Ok(())
}

/// What the agent can see from `center`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub center: StateId,
    pub boundary: usize,
    pub observed: BTreeSet<StateId>,
    pub observed_unsafe: BTreeSet<StateId>,
}

impl Observation {
    /// Observation with an explicit visible set, for synthetic instances.
    pub fn from_sets(
        center: StateId,
        boundary: usize,
        observed: impl IntoIterator<Item = StateId>,
        unsafe_states: impl IntoIterator<Item = StateId>,
    ) -> Self {
        let mut observed: BTreeSet<StateId> = observed.into_iter().collect();
        observed.insert(center);
        let observed_unsafe = unsafe_states
            .into_iter()
            .filter(|s| observed.contains(s))
            .collect();
        Self {
            center,
            boundary,
            observed,
            observed_unsafe,
        }
    }

    #[inline]
    pub fn is_observed(&self, s: StateId) -> bool {
        self.observed.contains(&s)
    }

    #[inline]
    pub fn is_observed_unsafe(&self, s: StateId) -> bool {
        self.observed_unsafe.contains(&s)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RowDocument {
    Sparse(Vec<(usize, f64)>),
    Dense(Vec<f64>),
}

/// JSON shape of an MDP. Rows are written sparse (`[[next, prob], ...]`);
/// dense rows (`[p_0, ..., p_{N-1}]`) are accepted on input.
#[derive(Serialize, Deserialize)]
struct MdpDocument {
    num_states: usize,
    num_actions: usize,
    kernel: Vec<Vec<RowDocument>>,
    #[serde(rename = "unsafe")]
    unsafe_states: Vec<usize>,
    initial_state: usize,
    #[serde(default)]
    goal: Vec<usize>,
    #[serde(default)]
    rewards: Vec<(usize, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<GridMetadata>,
}

impl From<&TabularMdp> for MdpDocument {
    fn from(mdp: &TabularMdp) -> Self {
        let kernel = (0..mdp.num_states)
            .map(|i| {
                (0..mdp.num_actions)
                    .map(|b| {
                        RowDocument::Sparse(
                            mdp.row(StateId(i), ActionId(b))
                                .iter()
                                .map(|(j, p)| (j.0, p))
                                .collect(),
                        )
                    })
                    .collect()
            })
            .collect();
        Self {
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            kernel,
            unsafe_states: mdp.unsafe_states().map(|s| s.0).collect(),
            initial_state: mdp.initial_state.0,
            goal: mdp.goal_states().map(|s| s.0).collect(),
            rewards: mdp
                .entry_reward
                .iter()
                .enumerate()
                .filter(|(_, &r)| r != 0.0)
                .map(|(i, &r)| (i, r))
                .collect(),
            metadata: mdp.metadata.clone(),
        }
    }
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDocument) -> Result<Self> {
        let kernel = doc
            .kernel
            .into_iter()
            .map(|per_action| {
                per_action
                    .into_iter()
                    .map(|row| match row {
                        RowDocument::Sparse(entries) => {
                            entries.into_iter().map(|(j, p)| (StateId(j), p)).collect()
                        }
                        RowDocument::Dense(probs) => probs
                            .into_iter()
                            .enumerate()
                            .map(|(j, p)| (StateId(j), p))
                            .collect(),
                    })
                    .collect()
            })
            .collect();
        let mut mdp = TabularMdp::new(
            doc.num_states,
            doc.num_actions,
            kernel,
            StateId(doc.initial_state),
        )?
        .with_unsafe(doc.unsafe_states.into_iter().map(StateId))?
        .with_goals(doc.goal.into_iter().map(StateId))?;
        for (s, r) in doc.rewards {
            mdp = mdp.with_entry_reward(StateId(s), r)?;
        }
        if let Some(meta) = doc.metadata {
            if meta.positions.len() != mdp.num_states {
                return Err(precondition("metadata positions must cover every state"));
            }
            mdp = mdp.with_metadata(meta);
        }
        Ok(mdp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 0 -> {1, 2}, 1 -> 3, 2 and 3 absorbing; state 3 unsafe.
    fn chain() -> TabularMdp {
        let kernel = vec![
            vec![vec![(StateId(1), 0.5), (StateId(2), 0.5)]],
            vec![vec![(StateId(3), 1.0)]],
            vec![vec![(StateId(2), 1.0)]],
            vec![vec![(StateId(3), 1.0)]],
        ];
        TabularMdp::new(4, 1, kernel, StateId(0))
            .unwrap()
            .with_unsafe([StateId(3)])
            .unwrap()
    }

    #[test]
    fn rejects_rows_that_do_not_sum_to_one() {
        let kernel = vec![vec![vec![(StateId(0), 0.7)]]];
        let err = TabularMdp::new(1, 1, kernel, StateId(0)).unwrap_err();
        assert!(matches!(err, Error::InvalidKernelRow { .. }));
    }

    #[test]
    fn rejects_negative_entries_and_bad_indices() {
        let neg = vec![vec![vec![(StateId(0), 1.5), (StateId(1), -0.5)]], vec![vec![(StateId(1), 1.0)]]];
        assert!(TabularMdp::new(2, 1, neg, StateId(0)).is_err());
        let oob = vec![vec![vec![(StateId(5), 1.0)]]];
        assert!(TabularMdp::new(1, 1, oob, StateId(0)).is_err());
    }

    #[test]
    fn unsafe_initial_state_is_rejected() {
        let kernel = vec![vec![vec![(StateId(0), 1.0)]]];
        let err = TabularMdp::new(1, 1, kernel, StateId(0))
            .unwrap()
            .with_unsafe([StateId(0)])
            .unwrap_err();
        assert!(matches!(err, Error::UnsafeInitialState(0)));
    }

    #[test]
    fn deterministic_row_always_steps_to_its_successor() {
        let mdp = chain();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (next, r) = mdp.step(StateId(1), ActionId(0), &mut rng).unwrap();
            assert_eq!(next, StateId(3));
            assert_eq!(r, 0.0);
        }
    }

    #[test]
    fn step_rejects_out_of_range_indices() {
        let mdp = chain();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(mdp.step(StateId(9), ActionId(0), &mut rng).is_err());
        assert!(mdp.step(StateId(0), ActionId(1), &mut rng).is_err());
    }

    #[test]
    fn uniform_row_frequencies_within_three_sigma() {
        let kernel = vec![
            vec![(0..4).map(|j| (StateId(j), 0.25)).collect::<Vec<_>>()];
            4
        ];
        let mdp = TabularMdp::new(4, 1, kernel, StateId(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[mdp.step(StateId(0), ActionId(0), &mut rng).unwrap().0 .0] += 1;
        }
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * 0.25).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn observe_counts_all_nonzero_outcomes() {
        let mdp = chain();
        let one = mdp.observe(StateId(0), 1).unwrap();
        assert_eq!(
            one.observed.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
        assert!(one.observed_unsafe.is_empty());
        let two = mdp.observe(StateId(0), 2).unwrap();
        assert!(two.is_observed_unsafe(StateId(3)));
        assert!(mdp.observe(StateId(0), 0).is_err());
    }

    #[test]
    fn unsafe_center_observes_itself() {
        let mdp = chain();
        let obs = mdp.observe(StateId(3), 1).unwrap();
        assert!(obs.is_observed_unsafe(StateId(3)));
    }

    #[test]
    fn json_round_trip_and_dense_rows() {
        let mdp = chain();
        let back = TabularMdp::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(back, mdp);

        let dense = r#"{"num_states":2,"num_actions":1,
            "kernel":[[[0.25,0.75]],[[0.0,1.0]]],"unsafe":[1],"initial_state":0}"#;
        let mdp = TabularMdp::from_json(dense).unwrap();
        assert_eq!(mdp.transition_probability(StateId(0), ActionId(0), StateId(1)), 0.75);
        assert_eq!(mdp.row(StateId(1), ActionId(0)).successors(), &[StateId(1)]);
        assert!(mdp.is_unsafe(StateId(1)));
    }
}
