//! Plain-text grid layouts.
//!
//! A layout file is a header of `key: value` lines, a `---` separator and the
//! grid, top row first. Lines starting with `;` are comments. Legend:
//!
//! | char | meaning                 |
//! |------|-------------------------|
//! | `.`  | free cell               |
//! | `#`  | wall                    |
//! | `X`  | unsafe cell             |
//! | `G`  | goal cell               |
//! | `S`  | agent start             |
//! | `P`  | pacman start            |
//! | `M`  | ghost start             |
//! | `o`  | food                    |
//!
//! Coordinates are `(x, y)` with `y = 0` the bottom row.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Free,
    Wall,
    Unsafe,
    Goal,
    Start,
    PacmanStart,
    GhostStart,
    Food,
}

impl Cell {
    fn from_char(c: char) -> Option<Self> {
        Some(match c {
            '.' => Cell::Free,
            '#' => Cell::Wall,
            'X' => Cell::Unsafe,
            'G' => Cell::Goal,
            'S' => Cell::Start,
            'P' => Cell::PacmanStart,
            'M' => Cell::GhostStart,
            'o' => Cell::Food,
            _ => return None,
        })
    }

    fn to_char(self) -> char {
        match self {
            Cell::Free => '.',
            Cell::Wall => '#',
            Cell::Unsafe => 'X',
            Cell::Goal => 'G',
            Cell::Start => 'S',
            Cell::PacmanStart => 'P',
            Cell::GhostStart => 'M',
            Cell::Food => 'o',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub header: BTreeMap<String, String>,
    pub width: usize,
    pub height: usize,
    /// Row-major from the bottom row: `cells[y * width + x]`.
    cells: Vec<Cell>,
}

impl Layout {
    pub fn parse(text: &str) -> Result<Self> {
        let mut header = BTreeMap::new();
        let mut lines = text.lines().enumerate();
        let mut separated = false;
        for (no, line) in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            if line == "---" {
                separated = true;
                break;
            }
            let (key, value) = line.split_once(':').ok_or_else(|| Error::Layout {
                line: no + 1,
                message: format!("expected `key: value`, found {line:?}"),
            })?;
            header.insert(key.trim().to_string(), value.trim().to_string());
        }
        if !separated {
            return Err(Error::Layout {
                line: text.lines().count(),
                message: "missing `---` before the grid".into(),
            });
        }

        let mut rows: Vec<Vec<Cell>> = Vec::new();
        let mut width = None;
        for (no, line) in lines {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with(';') {
                continue;
            }
            let row = line
                .chars()
                .map(|c| {
                    Cell::from_char(c).ok_or_else(|| Error::Layout {
                        line: no + 1,
                        message: format!("unknown cell character {c:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Layout {
                        line: no + 1,
                        message: format!("row has {} cells, expected {w}", row.len()),
                    })
                }
                _ => {}
            }
            rows.push(row);
        }
        let width = width.ok_or_else(|| Error::Layout {
            line: text.lines().count(),
            message: "empty grid".into(),
        })?;
        let height = rows.len();
        let cells = rows.into_iter().rev().flatten().collect();
        Ok(Self {
            header,
            width,
            height,
            cells,
        })
    }

    pub fn cell(&self, x: usize, y: usize) -> Cell {
        self.cells[y * self.width + x]
    }

    /// Cells of the given kind, ordered by `(y, x)`.
    pub fn find(&self, kind: Cell) -> Vec<(usize, usize)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == kind)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect()
    }

    pub fn kind(&self) -> Option<&str> {
        self.header.get("kind").map(String::as_str)
    }

    /// Parses a header value, with `default` when the key is absent.
    pub fn param<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.header.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Layout {
                line: 0,
                message: format!("header `{key}` has invalid value {v:?}"),
            }),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.header {
            writeln!(f, "{k}: {v}")?;
        }
        writeln!(f, "---")?;
        for y in (0..self.height).rev() {
            let row: String = (0..self.width).map(|x| self.cell(x, y).to_char()).collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}
