use std::collections::VecDeque;

use super::layout::{Cell, Layout};
use super::{offset, Environment, DOWN, LEFT, RIGHT, STAY, UP};
use crate::belief::SuccessorTable;
use crate::error::{precondition, Error, Result};
use crate::mdp::{ActionId, GridMetadata, StateId, TabularMdp};

/// Order in which the ghost breaks distance ties, and pacman's first four
/// actions.
const DIRECTIONS: [(i64, i64); 4] = [RIGHT, UP, LEFT, DOWN];
const ACTIONS: [((i64, i64), &str); 5] = [
    (RIGHT, "right"),
    (UP, "up"),
    (LEFT, "left"),
    (DOWN, "down"),
    (STAY, "no_act"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct PacmanSpec {
    pub width: usize,
    pub height: usize,
    /// `walls[y * width + x]`
    pub walls: Vec<bool>,
    pub pacman_start: (usize, usize),
    pub ghost_start: (usize, usize),
    pub food: [(usize, usize); 2],
    /// Probability that the ghost takes the step that brings it closest to
    /// pacman's new cell; otherwise it moves in a uniformly random legal
    /// direction.
    pub chase: f64,
    pub boundary: usize,
}

/// Decoded Pacman state. Bit `i` of `eaten` is set once food `i` is gone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacmanState {
    pub pacman: (usize, usize),
    pub ghost: (usize, usize),
    pub eaten: u8,
}

impl PacmanSpec {
    pub fn from_layout(layout: &Layout) -> Result<Self> {
        let single = |kind: Cell, name: &str| match layout.find(kind).as_slice() {
            [c] => Ok(*c),
            found => Err(Error::Layout {
                line: 0,
                message: format!("expected one {name}, found {}", found.len()),
            }),
        };
        let food = layout.find(Cell::Food);
        if food.len() != 2 {
            return Err(Error::Layout {
                line: 0,
                message: format!("expected two food cells, found {}", food.len()),
            });
        }
        let mut walls = Vec::with_capacity(layout.width * layout.height);
        for y in 0..layout.height {
            for x in 0..layout.width {
                walls.push(match layout.cell(x, y) {
                    Cell::Wall => true,
                    Cell::Free | Cell::Food | Cell::PacmanStart | Cell::GhostStart => false,
                    other => {
                        return Err(Error::Layout {
                            line: 0,
                            message: format!("cell {other:?} is not allowed in a pacman maze"),
                        })
                    }
                });
            }
        }
        Ok(Self {
            width: layout.width,
            height: layout.height,
            walls,
            pacman_start: single(Cell::PacmanStart, "pacman start")?,
            ghost_start: single(Cell::GhostStart, "ghost start")?,
            food: [food[0], food[1]],
            chase: layout.param("chase", 0.9)?,
            boundary: layout.param("boundary", 3)?,
        })
    }

    fn is_wall(&self, (x, y): (usize, usize)) -> bool {
        self.walls[y * self.width + x]
    }

    /// State index codec over the maze's free cells.
    pub fn codec(&self) -> PacmanCodec {
        PacmanCodec::new(self)
    }
}

/// Dense encoding `((pacman * cells) + ghost) * 4 + eaten`.
#[derive(Debug, Clone)]
pub struct PacmanCodec {
    width: usize,
    cells: Vec<(usize, usize)>,
    /// Cell index by grid position, `usize::MAX` for walls.
    index: Vec<usize>,
}

impl PacmanCodec {
    fn new(spec: &PacmanSpec) -> Self {
        let mut cells = Vec::new();
        let mut index = vec![usize::MAX; spec.width * spec.height];
        for y in 0..spec.height {
            for x in 0..spec.width {
                if !spec.is_wall((x, y)) {
                    index[y * spec.width + x] = cells.len();
                    cells.push((x, y));
                }
            }
        }
        Self {
            width: spec.width,
            cells,
            index,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_states(&self) -> usize {
        self.cells.len() * self.cells.len() * 4
    }

    fn cell(&self, (x, y): (usize, usize)) -> Option<usize> {
        match self.index.get(y * self.width + x) {
            Some(&i) if i != usize::MAX => Some(i),
            _ => None,
        }
    }

    pub fn encode(&self, state: &PacmanState) -> Option<StateId> {
        let p = self.cell(state.pacman)?;
        let g = self.cell(state.ghost)?;
        if state.eaten > 3 {
            return None;
        }
        Some(StateId((p * self.cells.len() + g) * 4 + state.eaten as usize))
    }

    pub fn decode(&self, s: StateId) -> PacmanState {
        let c = self.cells.len();
        let eaten = (s.0 % 4) as u8;
        let pg = s.0 / 4;
        PacmanState {
            pacman: self.cells[pg / c],
            ghost: self.cells[pg % c],
            eaten,
        }
    }
}

struct Maze<'a> {
    spec: &'a PacmanSpec,
    codec: PacmanCodec,
    /// All-pairs shortest path lengths between free cells.
    dist: Vec<Vec<usize>>,
}

impl<'a> Maze<'a> {
    fn new(spec: &'a PacmanSpec) -> Self {
        let codec = spec.codec();
        let c = codec.num_cells();
        let mut dist = vec![vec![usize::MAX; c]; c];
        for (src, row) in dist.iter_mut().enumerate() {
            row[src] = 0;
            let mut queue = VecDeque::from([src]);
            while let Some(i) = queue.pop_front() {
                for n in Self::neighbors_of(spec, &codec, codec.cells[i]) {
                    let j = codec.cell(n).expect("neighbors are free");
                    if row[j] == usize::MAX {
                        row[j] = row[i] + 1;
                        queue.push_back(j);
                    }
                }
            }
        }
        Self { spec, codec, dist }
    }

    fn neighbors_of(spec: &PacmanSpec, codec: &PacmanCodec, pos: (usize, usize)) -> Vec<(usize, usize)> {
        DIRECTIONS
            .iter()
            .filter_map(|&d| offset(pos.0, pos.1, d, spec.width, spec.height))
            .filter(|&n| codec.cell(n).is_some())
            .collect()
    }

    fn neighbors(&self, pos: (usize, usize)) -> Vec<(usize, usize)> {
        Self::neighbors_of(self.spec, &self.codec, pos)
    }

    fn pacman_move(&self, pos: (usize, usize), d: (i64, i64)) -> (usize, usize) {
        match offset(pos.0, pos.1, d, self.spec.width, self.spec.height) {
            Some(n) if !self.spec.is_wall(n) => n,
            _ => pos,
        }
    }

    /// Distribution of the ghost's next cell given pacman's next cell.
    fn ghost_moves(&self, ghost: (usize, usize), target: (usize, usize)) -> Vec<((usize, usize), f64)> {
        let legal = self.neighbors(ghost);
        if legal.is_empty() {
            return vec![(ghost, 1.0)];
        }
        let t = self.codec.cell(target).expect("pacman is on a free cell");
        let mut best = legal[0];
        let mut best_d = usize::MAX;
        for &n in &legal {
            let d = self.dist[self.codec.cell(n).expect("free")][t];
            if d < best_d {
                best_d = d;
                best = n;
            }
        }
        let random = (1.0 - self.spec.chase) / legal.len() as f64;
        let mut out: Vec<((usize, usize), f64)> = legal.iter().map(|&n| (n, random)).collect();
        out.iter_mut().find(|e| e.0 == best).expect("best is legal").1 += self.spec.chase;
        out
    }

    fn eat(&self, pos: (usize, usize), eaten: u8) -> u8 {
        let mut eaten = eaten;
        for (i, &f) in self.spec.food.iter().enumerate() {
            if pos == f {
                eaten |= 1 << i;
            }
        }
        eaten
    }

    /// Next state after both moves. Pacman is caught when both end on the same
    /// cell or when pacman walks into the ghost's old cell, which includes the
    /// two swapping places. A catch puts the ghost on pacman's cell.
    fn resolve(&self, from: &PacmanState, pacman: (usize, usize), ghost: (usize, usize)) -> PacmanState {
        let caught = pacman == ghost || pacman == from.ghost;
        PacmanState {
            pacman,
            ghost: if caught { pacman } else { ghost },
            eaten: self.eat(pacman, from.eaten),
        }
    }

    fn is_caught(s: &PacmanState) -> bool {
        s.pacman == s.ghost
    }

    fn is_won(s: &PacmanState) -> bool {
        s.eaten == 3 && !Self::is_caught(s)
    }
}

/// Product MDP over pacman cell, ghost cell and eaten food. Pacman moves
/// first (into a wall means staying), then the ghost chases pacman's new
/// cell. Caught states are unsafe; eating the second food wins with reward 1.
pub fn build_pacman(spec: &PacmanSpec) -> Result<Environment> {
    if !(0.0..=1.0).contains(&spec.chase) {
        return Err(precondition(format!("chase probability {} outside [0, 1]", spec.chase)));
    }
    if spec.walls.len() != spec.width * spec.height {
        return Err(precondition("wall grid does not match the maze size"));
    }
    for (name, pos) in [
        ("pacman start", spec.pacman_start),
        ("ghost start", spec.ghost_start),
        ("food", spec.food[0]),
        ("food", spec.food[1]),
    ] {
        if pos.0 >= spec.width || pos.1 >= spec.height || spec.is_wall(pos) {
            return Err(precondition(format!("{name} {pos:?} is not a free cell")));
        }
    }
    if spec.food[0] == spec.food[1] {
        return Err(precondition("the two food cells coincide"));
    }
    if spec.pacman_start == spec.ghost_start {
        return Err(precondition("pacman starts on the ghost"));
    }

    let maze = Maze::new(spec);
    let codec = &maze.codec;
    let n = codec.num_states();
    let k = ACTIONS.len();
    let encode = |s: &PacmanState| codec.encode(s).expect("positions are free cells");

    let mut kernel = Vec::with_capacity(n);
    let mut successors = SuccessorTable::new(n, k);
    let mut unsafe_states = Vec::new();
    let mut goals = Vec::new();
    for idx in 0..n {
        let s = StateId(idx);
        let state = codec.decode(s);
        if Maze::is_caught(&state) || Maze::is_won(&state) {
            if Maze::is_caught(&state) {
                unsafe_states.push(s);
            } else {
                goals.push(s);
            }
            kernel.push(vec![vec![(s, 1.0)]; k]);
            for a in 0..k {
                successors.set(s, ActionId(a), vec![s], None);
            }
            continue;
        }

        // Candidates: pacman and the ghost each stay or step to a free
        // neighbor.
        let mut pac_options = maze.neighbors(state.pacman);
        pac_options.push(state.pacman);
        let mut ghost_options = maze.neighbors(state.ghost);
        ghost_options.push(state.ghost);
        let mut candidates = Vec::with_capacity(pac_options.len() * ghost_options.len());
        for &p in &pac_options {
            for &g in &ghost_options {
                candidates.push(encode(&maze.resolve(&state, p, g)));
            }
        }
        candidates.sort();
        candidates.dedup();

        let mut per_action = Vec::with_capacity(k);
        for (a, &(d, _)) in ACTIONS.iter().enumerate() {
            let pacman = maze.pacman_move(state.pacman, d);
            let row = maze
                .ghost_moves(state.ghost, pacman)
                .into_iter()
                .map(|(g, p)| (encode(&maze.resolve(&state, pacman, g)), p))
                .collect();
            per_action.push(row);
            successors.set(s, ActionId(a), candidates.clone(), None);
        }
        kernel.push(per_action);
    }

    let initial = PacmanState {
        pacman: spec.pacman_start,
        ghost: spec.ghost_start,
        eaten: maze.eat(spec.pacman_start, 0),
    };
    let mut mdp = TabularMdp::new(n, k, kernel, encode(&initial))?
        .with_unsafe(unsafe_states)?
        .with_goals(goals.iter().copied())?
        .with_metadata(GridMetadata {
            kind: "pacman".into(),
            width: spec.width,
            height: spec.height,
            positions: (0..n).map(|s| codec.decode(StateId(s)).pacman).collect(),
        });
    for g in goals {
        mdp = mdp.with_entry_reward(g, 1.0)?;
    }
    Ok(Environment {
        name: "pacman".into(),
        mdp,
        successors,
        boundary: spec.boundary,
        action_names: ACTIONS.iter().map(|&(_, name)| name.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::layouts;

    /// Open 3x3 room without inner walls.
    fn open_room(chase: f64) -> PacmanSpec {
        let layout = Layout::parse(&format!(
            "kind: pacman\nchase: {chase}\n---\n#####\n#o.M#\n#...#\n#P.o#\n#####\n"
        ))
        .unwrap();
        PacmanSpec::from_layout(&layout).unwrap()
    }

    #[test]
    fn codec_round_trips() {
        let spec = open_room(0.9);
        let codec = spec.codec();
        assert_eq!(codec.num_states(), 9 * 9 * 4);
        for s in 0..codec.num_states() {
            let st = codec.decode(StateId(s));
            assert_eq!(codec.encode(&st), Some(StateId(s)));
        }
        assert_eq!(codec.encode(&PacmanState { pacman: (0, 0), ghost: (1, 1), eaten: 0 }), None);
    }

    #[test]
    fn chasing_ghost_catches_stationary_neighbor() {
        let spec = open_room(1.0);
        let env = build_pacman(&spec).unwrap();
        let codec = spec.codec();
        let s = codec
            .encode(&PacmanState { pacman: (2, 2), ghost: (3, 2), eaten: 0 })
            .unwrap();
        let row = env.mdp.row(s, ActionId(4));
        assert_eq!(row.successors().len(), 1);
        assert!(env.mdp.is_unsafe(row.successors()[0]));
    }

    #[test]
    fn swapping_cells_is_a_collision() {
        let spec = open_room(1.0);
        let env = build_pacman(&spec).unwrap();
        let codec = spec.codec();
        let s = codec
            .encode(&PacmanState { pacman: (2, 2), ghost: (3, 2), eaten: 0 })
            .unwrap();
        // pacman steps right into the ghost's cell; the ghost steps away
        let row = env.mdp.row(s, ActionId(0));
        let caught: f64 = row.iter().filter(|(j, _)| env.mdp.is_unsafe(*j)).map(|e| e.1).sum();
        assert_eq!(caught, 1.0);
    }

    #[test]
    fn ghost_distribution_by_hand() {
        // ghost in the top-right corner (3,3) has legal moves left and down;
        // pacman stays at (1,1). Both moves get closer; tie order prefers left
        // over down (right, up, left, down).
        let spec = open_room(0.9);
        let env = build_pacman(&spec).unwrap();
        let codec = spec.codec();
        let s = codec
            .encode(&PacmanState { pacman: (1, 1), ghost: (3, 3), eaten: 0 })
            .unwrap();
        let row = env.mdp.row(s, ActionId(4));
        let to = |g| codec.encode(&PacmanState { pacman: (1, 1), ghost: g, eaten: 0 }).unwrap();
        assert!((row.probability_of(to((2, 3))) - 0.95).abs() < 1e-15);
        assert!((row.probability_of(to((3, 2))) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn food_is_eaten_once_and_win_is_terminal() {
        let spec = open_room(0.0);
        let env = build_pacman(&spec).unwrap();
        let codec = spec.codec();
        // food 1 at (1,3) eaten, standing next to food 0 at (3,1)
        let s = codec
            .encode(&PacmanState { pacman: (2, 1), ghost: (1, 3), eaten: 2 })
            .unwrap();
        let row = env.mdp.row(s, ActionId(0));
        for (j, _) in row.iter() {
            let st = codec.decode(j);
            assert_eq!(st.eaten, 3);
            assert!(env.mdp.is_goal(j));
            assert_eq!(env.mdp.entry_reward(j), 1.0);
        }
    }

    #[test]
    fn food_mask_never_shrinks() {
        let spec = open_room(0.9);
        let env = build_pacman(&spec).unwrap();
        let codec = spec.codec();
        for s in 0..env.mdp.num_states() {
            let before = codec.decode(StateId(s)).eaten;
            for a in 0..5 {
                for &j in env.mdp.row(StateId(s), ActionId(a)).successors() {
                    assert_eq!(codec.decode(j).eaten & before, before);
                }
            }
        }
    }

    #[test]
    fn unsafe_states_are_exactly_collisions() {
        let spec = open_room(0.9);
        let env = build_pacman(&spec).unwrap();
        let codec = spec.codec();
        for s in 0..env.mdp.num_states() {
            let st = codec.decode(StateId(s));
            assert_eq!(env.mdp.is_unsafe(StateId(s)), st.pacman == st.ghost);
        }
    }

    #[test]
    fn true_support_within_candidates() {
        let spec = open_room(0.9);
        let env = build_pacman(&spec).unwrap();
        for s in 0..env.mdp.num_states() {
            for a in 0..5 {
                let (s, a) = (StateId(s), ActionId(a));
                let cands = env.successors.candidates(s, a);
                for j in env.mdp.row(s, a).successors() {
                    assert!(cands.contains(j));
                }
            }
        }
    }

    #[test]
    fn shipped_maze_scale() {
        let env = crate::envs::from_layout(layouts::PACMAN).unwrap();
        let n = env.mdp.num_states();
        assert!((2500..=5000).contains(&n), "{n} states");
        assert_eq!(env.mdp.num_actions(), 5);
        assert_eq!(env.boundary, 3);
        let spec = PacmanSpec::from_layout(&Layout::parse(layouts::PACMAN).unwrap()).unwrap();
        assert_eq!(spec.pacman_start, (1, 3));
    }
}
