//! Benchmark environments.

mod bridgecross;
pub mod layout;
mod pacman;

pub use bridgecross::{build_bridgecross, ActionSet, BridgeCrossSpec};
pub use layout::{Cell, Layout};
pub use pacman::{build_pacman, PacmanCodec, PacmanSpec, PacmanState};

use crate::belief::SuccessorTable;
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Shipped layout files.
pub mod layouts {
    /// 20x20 slippery bridge, five actions.
    pub const BRIDGECROSS: &str = include_str!("../../layouts/bridgecross.txt");
    /// Same map with the four diagonal moves added.
    pub const BRIDGECROSS_DIAGONAL: &str = include_str!("../../layouts/bridgecross_diagonal.txt");
    /// Small maze with one ghost and two pieces of food.
    pub const PACMAN: &str = include_str!("../../layouts/pacman.txt");
}

/// A ground-truth MDP together with what the agent is told about it: the
/// candidate successors of every move and how far it can see.
#[derive(Debug, Clone)]
pub struct Environment {
    pub name: String,
    pub mdp: TabularMdp,
    pub successors: SuccessorTable,
    pub boundary: usize,
    pub action_names: Vec<String>,
}

/// Builds whichever environment a layout's `kind` header names.
pub fn from_layout(text: &str) -> Result<Environment> {
    let layout = Layout::parse(text)?;
    match layout.kind() {
        Some("bridgecross") => build_bridgecross(&BridgeCrossSpec::from_layout(&layout)?),
        Some("pacman") => build_pacman(&PacmanSpec::from_layout(&layout)?),
        other => Err(Error::Layout {
            line: 0,
            message: format!("unknown layout kind {other:?}"),
        }),
    }
}

/// Moves as `(dx, dy)` offsets.
pub(crate) const RIGHT: (i64, i64) = (1, 0);
pub(crate) const UP: (i64, i64) = (0, 1);
pub(crate) const LEFT: (i64, i64) = (-1, 0);
pub(crate) const DOWN: (i64, i64) = (0, -1);
pub(crate) const STAY: (i64, i64) = (0, 0);

pub(crate) fn offset(x: usize, y: usize, d: (i64, i64), width: usize, height: usize) -> Option<(usize, usize)> {
    let nx = x as i64 + d.0;
    let ny = y as i64 + d.1;
    if nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
        None
    } else {
        Some((nx as usize, ny as usize))
    }
}
