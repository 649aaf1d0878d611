//! Small CSV tables exchanged between subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use orchard_core::NodeId;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct CountRow {
    row: usize,
    count: f64,
}

#[derive(Debug, Deserialize)]
struct YieldRow {
    row: usize,
    #[serde(rename = "yield")]
    value: f64,
}

#[derive(Debug, Deserialize)]
struct TrackRow {
    fruit_id: usize,
    frame_id: u32,
    detection_index: u32,
}

fn read_keyed<T, F>(path: &Path, key: F) -> Result<Vec<(usize, T)>>
where
    T: for<'de> Deserialize<'de>,
    F: Fn(&T) -> usize,
{
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut out = Vec::new();
    for (i, record) in reader.deserialize().enumerate() {
        // Line 1 is the header.
        let value: T = record.with_context(|| format!("{}: line {}", path.display(), i + 2))?;
        out.push((key(&value), value));
    }
    Ok(out)
}

fn unique(path: &Path, pairs: Vec<(usize, f64)>) -> Result<BTreeMap<usize, f64>> {
    let mut map = BTreeMap::new();
    for (row, v) in pairs {
        if map.insert(row, v).is_some() {
            bail!("{}: row {row} listed twice", path.display());
        }
    }
    Ok(map)
}

/// `row,count` table as written by `track`.
pub fn read_counts(path: &Path) -> Result<BTreeMap<usize, f64>> {
    let rows = read_keyed(path, |r: &CountRow| r.row)?;
    unique(path, rows.into_iter().map(|(k, r)| (k, r.count)).collect())
}

/// `row,yield` table.
pub fn read_yields(path: &Path) -> Result<BTreeMap<usize, f64>> {
    let rows = read_keyed(path, |r: &YieldRow| r.row)?;
    unique(path, rows.into_iter().map(|(k, r)| (k, r.value)).collect())
}

/// Inlier detections per fruit from `tracks.csv`.
pub fn read_tracks(path: &Path) -> Result<BTreeMap<usize, Vec<NodeId>>> {
    let rows = read_keyed(path, |r: &TrackRow| r.fruit_id)?;
    let mut tracks: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for (id, r) in rows {
        tracks.entry(id).or_default().push(NodeId::new(r.frame_id, r.detection_index));
    }
    Ok(tracks)
}

pub fn counts_to_csv(counts: &[usize]) -> String {
    let mut out = String::from("row,count\n");
    for (row, c) in counts.iter().enumerate() {
        let _ = writeln!(out, "{row},{c}");
    }
    out
}
