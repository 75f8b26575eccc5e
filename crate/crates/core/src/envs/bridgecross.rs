use serde::{Deserialize, Serialize};

use super::layout::{Cell, Layout};
use super::{offset, Environment, DOWN, LEFT, RIGHT, STAY, UP};
use crate::belief::SuccessorTable;
use crate::error::{precondition, Error, Result};
use crate::mdp::{ActionId, GridMetadata, StateId, TabularMdp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSet {
    /// right, up, left, down, stay
    Cardinal5,
    /// the cardinal moves, the four diagonals, then stay
    Diagonal9,
}

impl ActionSet {
    pub fn moves(self) -> Vec<((i64, i64), &'static str)> {
        let mut moves = vec![(RIGHT, "right"), (UP, "up"), (LEFT, "left"), (DOWN, "down")];
        if self == ActionSet::Diagonal9 {
            moves.extend([
                ((1, 1), "up_right"),
                ((-1, 1), "up_left"),
                ((-1, -1), "down_left"),
                ((1, -1), "down_right"),
            ]);
        }
        moves.push((STAY, "stay"));
        moves
    }
}

impl std::str::FromStr for ActionSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cardinal5" => Ok(ActionSet::Cardinal5),
            "diagonal9" => Ok(ActionSet::Diagonal9),
            _ => Err(format!("unknown action set {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeCrossSpec {
    pub width: usize,
    pub height: usize,
    /// Probability of an outcome other than the intended one, spread evenly
    /// over the outcomes of all other actions.
    pub slip: f64,
    pub actions: ActionSet,
    pub unsafe_cells: Vec<(usize, usize)>,
    pub goal_cells: Vec<(usize, usize)>,
    pub start: (usize, usize),
    pub boundary: usize,
}

impl BridgeCrossSpec {
    pub fn from_layout(layout: &Layout) -> Result<Self> {
        if !layout.find(Cell::Wall).is_empty() {
            return Err(Error::Layout {
                line: 0,
                message: "bridgecross layouts have no walls".into(),
            });
        }
        let start = match layout.find(Cell::Start).as_slice() {
            [s] => *s,
            found => {
                return Err(Error::Layout {
                    line: 0,
                    message: format!("expected one start cell, found {}", found.len()),
                })
            }
        };
        Ok(Self {
            width: layout.width,
            height: layout.height,
            slip: layout.param("slip", 0.04)?,
            actions: layout.param("actions", ActionSet::Cardinal5)?,
            unsafe_cells: layout.find(Cell::Unsafe),
            goal_cells: layout.find(Cell::Goal),
            start,
            boundary: layout.param("boundary", 2)?,
        })
    }

    pub fn state_of(&self, x: usize, y: usize) -> StateId {
        StateId(y * self.width + x)
    }

    pub fn cell_of(&self, s: StateId) -> (usize, usize) {
        (s.0 % self.width, s.0 / self.width)
    }
}

/// Grid world where every move slips with probability `slip`. Moves off the
/// grid leave the agent in place. Unsafe and goal cells are absorbing;
/// entering a goal cell pays 1.
pub fn build_bridgecross(spec: &BridgeCrossSpec) -> Result<Environment> {
    if !(0.0..1.0).contains(&spec.slip) {
        return Err(precondition(format!("slip {} outside [0, 1)", spec.slip)));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(precondition("grid must be nonempty"));
    }
    let in_grid = |&(x, y): &(usize, usize)| x < spec.width && y < spec.height;
    if !in_grid(&spec.start) || !spec.unsafe_cells.iter().all(in_grid) || !spec.goal_cells.iter().all(in_grid) {
        return Err(precondition("cell outside the grid"));
    }
    if spec.goal_cells.iter().any(|g| spec.unsafe_cells.contains(g)) {
        return Err(precondition("a goal cell is also unsafe"));
    }
    if spec.goal_cells.contains(&spec.start) {
        return Err(precondition("the start cell is a goal"));
    }

    let n = spec.width * spec.height;
    let moves = spec.actions.moves();
    let k = moves.len();
    let mut terminal = vec![false; n];
    for &(x, y) in spec.unsafe_cells.iter().chain(&spec.goal_cells) {
        terminal[spec.state_of(x, y).0] = true;
    }

    let mut kernel = Vec::with_capacity(n);
    let mut successors = SuccessorTable::new(n, k);
    for s in 0..n {
        let (x, y) = spec.cell_of(StateId(s));
        let mut per_action = Vec::with_capacity(k);
        if terminal[s] {
            for a in 0..k {
                per_action.push(vec![(StateId(s), 1.0)]);
                successors.set(StateId(s), ActionId(a), vec![StateId(s)], Some(0));
            }
            kernel.push(per_action);
            continue;
        }
        let outcomes: Vec<StateId> = moves
            .iter()
            .map(|&(d, _)| match offset(x, y, d, spec.width, spec.height) {
                Some((nx, ny)) => spec.state_of(nx, ny),
                None => StateId(s),
            })
            .collect();
        for a in 0..k {
            let slip_each = if k > 1 { spec.slip / (k - 1) as f64 } else { 0.0 };
            let row = outcomes
                .iter()
                .enumerate()
                .map(|(b, &j)| (j, if b == a { 1.0 - spec.slip } else { slip_each }))
                .collect();
            per_action.push(row);
            successors.set(StateId(s), ActionId(a), outcomes.clone(), Some(a));
        }
        kernel.push(per_action);
    }

    let goals: Vec<StateId> = spec.goal_cells.iter().map(|&(x, y)| spec.state_of(x, y)).collect();
    let mut mdp = TabularMdp::new(n, k, kernel, spec.state_of(spec.start.0, spec.start.1))?
        .with_unsafe(spec.unsafe_cells.iter().map(|&(x, y)| spec.state_of(x, y)))?
        .with_goals(goals.iter().copied())?
        .with_metadata(GridMetadata {
            kind: "bridgecross".into(),
            width: spec.width,
            height: spec.height,
            positions: (0..n).map(|s| spec.cell_of(StateId(s))).collect(),
        });
    for g in goals {
        mdp = mdp.with_entry_reward(g, 1.0)?;
    }
    Ok(Environment {
        name: match spec.actions {
            ActionSet::Cardinal5 => "bridgecross".into(),
            ActionSet::Diagonal9 => "bridgecross_diagonal".into(),
        },
        mdp,
        successors,
        boundary: spec.boundary,
        action_names: moves.iter().map(|&(_, name)| name.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use std::collections::VecDeque;

    use super::*;
    use crate::envs::layouts;

    fn spec(slip: f64) -> BridgeCrossSpec {
        BridgeCrossSpec {
            width: 4,
            height: 3,
            slip,
            actions: ActionSet::Cardinal5,
            unsafe_cells: vec![(2, 2)],
            goal_cells: vec![(3, 2)],
            start: (0, 0),
            boundary: 2,
        }
    }

    #[test]
    fn zero_slip_is_deterministic() {
        let env = build_bridgecross(&spec(0.0)).unwrap();
        let s = StateId(1 * 4 + 1);
        assert_eq!(env.mdp.row(s, ActionId(0)).iter().collect::<Vec<_>>(), vec![(StateId(6), 1.0)]);
        assert_eq!(env.mdp.row(s, ActionId(4)).iter().collect::<Vec<_>>(), vec![(s, 1.0)]);
    }

    #[test]
    fn interior_move_right_keeps_intended_mass() {
        let env = build_bridgecross(&spec(0.04)).unwrap();
        let s = StateId(1 * 4 + 1);
        let row = env.mdp.row(s, ActionId(0));
        assert!((row.probability_of(StateId(6)) - 0.96).abs() < 1e-15);
        for j in [StateId(9), StateId(4), StateId(1), s] {
            assert!((row.probability_of(j) - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn corner_aggregates_off_grid_moves() {
        let env = build_bridgecross(&spec(0.04)).unwrap();
        // bottom-left corner, pushing left: left, down and stay all stay put
        let row = env.mdp.row(StateId(0), ActionId(2));
        assert!((row.probability_of(StateId(0)) - 0.98).abs() < 1e-15);
        let total: f64 = row.probabilities().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_cells_absorb() {
        let env = build_bridgecross(&spec(0.04)).unwrap();
        let pit = StateId(2 * 4 + 2);
        assert!(env.mdp.is_unsafe(pit));
        assert_eq!(env.mdp.row(pit, ActionId(1)).successors(), &[pit]);
        assert_eq!(env.mdp.entry_reward(StateId(11)), 1.0);
        assert!(env.mdp.is_goal(StateId(11)));
    }

    #[test]
    fn highly_informative_prior_mean_matches_truth() {
        use crate::belief::{DirichletBelief, NamedPrior, PriorTemplate};
        use crate::mdp::TransitionModel;
        let env = build_bridgecross(&spec(0.04)).unwrap();
        let prior = PriorTemplate::from_successors(&env.successors, NamedPrior::HighlyInformative).unwrap();
        let belief = DirichletBelief::new(std::sync::Arc::new(prior));
        let moments = belief.moments();
        for s in 0..env.mdp.num_states() {
            for a in 0..5 {
                let (s, a) = (StateId(s), ActionId(a));
                moments.visit_row(s, a, &mut |j, p| {
                    if !env.mdp.is_terminal(s) {
                        assert!((p - env.mdp.transition_probability(s, a, j)).abs() < 1e-15);
                    }
                });
            }
        }
    }

    #[test]
    fn diagonal_slip_spreads_over_eight() {
        let mut sp = spec(0.04);
        sp.actions = ActionSet::Diagonal9;
        let env = build_bridgecross(&sp).unwrap();
        let s = StateId(1 * 4 + 1);
        let row = env.mdp.row(s, ActionId(4));
        assert!((row.probability_of(StateId(2 * 4 + 2)) - 0.96).abs() < 1e-15);
        assert!((row.probability_of(s) - 0.005).abs() < 1e-15);
        assert_eq!(env.action_names.len(), 9);
    }

    fn shortest_path(spec: &BridgeCrossSpec) -> Option<usize> {
        let env = build_bridgecross(&BridgeCrossSpec { slip: 0.0, ..spec.clone() }).unwrap();
        let mdp = &env.mdp;
        let mut dist = vec![usize::MAX; mdp.num_states()];
        let mut queue = VecDeque::from([mdp.initial_state()]);
        dist[mdp.initial_state().0] = 0;
        while let Some(s) = queue.pop_front() {
            if mdp.is_goal(s) {
                return Some(dist[s.0]);
            }
            if mdp.is_terminal(s) {
                continue;
            }
            for a in 0..mdp.num_actions() {
                for &j in mdp.row(s, ActionId(a)).successors() {
                    if dist[j.0] == usize::MAX {
                        dist[j.0] = dist[s.0] + 1;
                        queue.push_back(j);
                    }
                }
            }
        }
        None
    }

    #[test]
    fn shipped_layout_needs_22_steps() {
        let layout = Layout::parse(layouts::BRIDGECROSS).unwrap();
        let spec = BridgeCrossSpec::from_layout(&layout).unwrap();
        assert_eq!((spec.width, spec.height), (20, 20));
        assert_eq!(spec.start, (0, 0));
        assert_eq!(shortest_path(&spec), Some(22));
        assert!(spec.unsafe_cells.contains(&(12, 8)));
        for safe in [(12, 9), (13, 8), (13, 1)] {
            assert!(!spec.unsafe_cells.contains(&safe));
        }
    }

    #[test]
    fn shipped_layouts_build() {
        let env = crate::envs::from_layout(layouts::BRIDGECROSS).unwrap();
        assert_eq!((env.mdp.num_states(), env.mdp.num_actions(), env.boundary), (400, 5, 2));
        let env = crate::envs::from_layout(layouts::BRIDGECROSS_DIAGONAL).unwrap();
        assert_eq!(env.mdp.num_actions(), 9);
    }

    #[test]
    fn observation_from_start_covers_two_moves() {
        let env = crate::envs::from_layout(layouts::BRIDGECROSS).unwrap();
        let obs = env.mdp.observe(env.mdp.initial_state(), 2).unwrap();
        let expected: Vec<StateId> = [(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (0, 2)]
            .iter()
            .map(|&(x, y)| StateId(y * 20 + x))
            .collect();
        assert_eq!(obs.observed.iter().copied().collect::<Vec<_>>(), {
            let mut e = expected;
            e.sort();
            e
        });
    }
}
