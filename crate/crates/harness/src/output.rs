//! Files consumed by the plotting scripts.
//!
//! | file              | columns                                                    |
//! |-------------------|------------------------------------------------------------|
//! | `episodes.csv`    | episode, repeat, outcome, steps, reward, safety_mode_entries |
//! | `steps_to_win.csv`| episode, repeat, steps, outcome                            |
//! | `visitation.csv`  | x, y, count                                                |
//! | `summary.json`    | the full [`RunSummary`]                                    |
//!
//! `steps_to_win.csv` reports `max_steps` for episodes that did not end in
//! success.

use std::fs;
use std::path::{Path, PathBuf};

use rcrl_core::agent::{EpisodeRecord, Outcome};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::experiment::{RunSummary, VisitCell};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub repeat: usize,
    pub outcome: Outcome,
    pub steps: usize,
    pub reward: f64,
    pub safety_mode_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepsToWinRow {
    pub episode: usize,
    pub repeat: usize,
    pub steps: usize,
    pub outcome: Outcome,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn episode_rows(summary: &RunSummary) -> Vec<EpisodeRow> {
    summary
        .repeats
        .iter()
        .flat_map(|r| {
            r.episodes.iter().map(move |e| EpisodeRow {
                episode: e.episode,
                repeat: r.repeat,
                outcome: e.outcome,
                steps: e.steps,
                reward: e.reward,
                safety_mode_entries: e.safety_mode_entries,
            })
        })
        .collect()
}

pub fn steps_to_win_rows(summary: &RunSummary) -> Vec<StepsToWinRow> {
    let cap = summary.config.max_steps;
    summary
        .repeats
        .iter()
        .flat_map(|r| {
            r.episodes.iter().map(move |e| StepsToWinRow {
                episode: e.episode,
                repeat: r.repeat,
                steps: if e.outcome == Outcome::Success { e.steps } else { cap },
                outcome: e.outcome,
            })
        })
        .collect()
}

/// Writes every file into `out`, creating it if needed. Returns the paths
/// written; a summary without a grid skips `visitation.csv` with a warning
/// on stderr.
pub fn export(summary: &RunSummary, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();

    let path = out.join("episodes.csv");
    write_rows(
        &path,
        &["episode", "repeat", "outcome", "steps", "reward", "safety_mode_entries"],
        episode_rows(summary),
    )?;
    written.push(path);

    let path = out.join("steps_to_win.csv");
    write_rows(&path, &["episode", "repeat", "steps", "outcome"], steps_to_win_rows(summary))?;
    written.push(path);

    if summary.visitation.is_empty() && !summary.repeats.is_empty() {
        eprintln!("warning: summary has no grid visitation series, skipping visitation.csv");
    } else {
        let path = out.join("visitation.csv");
        write_rows(&path, &["x", "y", "count"], summary.visitation.iter())?;
        written.push(path);
    }

    for (k, lines) in summary.traces.iter().enumerate() {
        if lines.is_empty() {
            continue;
        }
        let path = out.join(format!("trace_{k}.jsonl"));
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
    }

    let path = out.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(summary)?).map_err(io_err(&path))?;
    written.push(path);
    Ok(written)
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(&mut de)
        .map_err(|e| HarnessError::Config(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRow>> {
    read_rows(path)
}

pub fn read_steps_to_win(path: &Path) -> Result<Vec<StepsToWinRow>> {
    read_rows(path)
}

pub fn read_visitation(path: &Path) -> Result<Vec<VisitCell>> {
    read_rows(path)
}

/// Rebuilds per-repeat episode lists from `episodes.csv` rows.
pub fn episodes_by_repeat(rows: &[EpisodeRow]) -> Vec<Vec<EpisodeRecord>> {
    let repeats = rows.iter().map(|r| r.repeat + 1).max().unwrap_or(0);
    let mut out = vec![Vec::new(); repeats];
    for r in rows {
        out[r.repeat].push(EpisodeRecord {
            episode: r.episode,
            outcome: r.outcome,
            steps: r.steps,
            reward: r.reward,
            safety_mode_entries: r.safety_mode_entries,
        });
    }
    out
}
