//! On-disk dataset format.
//!
//! A dataset directory holds `manifest.csv` (`id,camera,scenario,fps,file`)
//! and one CSV per sequence with header
//! `frame_index,roi1_r,roi1_g,roi1_b,…,roi6_b,ref_hr_bpm` and one row per
//! frame. Frame indices must be contiguous.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{ColorSignalSequence, FPS, N_ROIS};
use crate::error::{Error, Result};
use crate::model::{ClassGrid, INPUT_FRAMES, INPUT_ROWS};

pub const MANIFEST_FILE: &str = "manifest.csv";
const MANIFEST_COLUMNS: [&str; 5] = ["id", "camera", "scenario", "fps", "file"];

fn color_columns() -> Vec<String> {
    (1..=N_ROIS).flat_map(|r| ["r", "g", "b"].map(|c| format!("roi{r}_{c}"))).collect()
}

fn sequence_header() -> Vec<String> {
    let mut h = vec!["frame_index".to_string()];
    h.extend(color_columns());
    h.push("ref_hr_bpm".into());
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub sequences: Vec<ColorSignalSequence>,
    pub rejections: Vec<Rejection>,
}

/// Writes `manifest.csv` plus one `<id>.csv` per sequence. Floats use the
/// shortest representation that round-trips.
pub fn write_dataset(dir: &Path, sequences: &[ColorSignalSequence]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    manifest.write_record(MANIFEST_COLUMNS)?;
    for seq in sequences {
        let file = format!("{}.csv", seq.id);
        manifest.write_record([
            seq.id.as_str(),
            seq.camera.name(),
            seq.scenario.name(),
            &seq.fps.to_string(),
            &file,
        ])?;
        let mut w = csv::Writer::from_path(dir.join(&file))?;
        w.write_record(sequence_header())?;
        for t in 0..seq.frames() {
            let mut row = Vec::with_capacity(INPUT_ROWS + 2);
            row.push(t.to_string());
            row.extend(seq.signals.iter().map(|c| c[t].to_string()));
            row.push(seq.ref_hr[t].to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(dir.join(&file), e))?;
    }
    manifest.flush().map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    id: String,
    camera: String,
    scenario: String,
    fps: f64,
    file: String,
}

/// Reads every sequence listed in the manifest. Bad files are rejected
/// with a reason and skipped; only an unreadable manifest is an error.
pub fn ingest(dir: &Path, grid: &ClassGrid) -> Result<IngestReport> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::Data(format!("{} not found", manifest_path.display())));
    }
    let mut reader = csv::Reader::from_path(&manifest_path)?;
    let headers = reader.headers()?.clone();
    for col in MANIFEST_COLUMNS {
        if !headers.iter().any(|h| h.trim() == col) {
            return Err(Error::Data(format!("manifest is missing column `{col}`")));
        }
    }
    let mut report = IngestReport::default();
    let mut seen = HashSet::new();
    for row in reader.deserialize::<ManifestRow>() {
        let row = row?;
        let file = row.file.clone();
        let outcome = if seen.insert(row.id.clone()) {
            read_sequence(dir, row, grid)
        } else {
            Err(format!("duplicate sequence id `{}`", row.id))
        };
        match outcome {
            Ok(seq) => report.sequences.push(seq),
            Err(reason) => {
                warn!("rejected {file}: {reason}");
                report.rejections.push(Rejection { file, reason });
            }
        }
    }
    Ok(report)
}

fn read_sequence(dir: &Path, row: ManifestRow, grid: &ClassGrid) -> std::result::Result<ColorSignalSequence, String> {
    let camera = row.camera.parse().map_err(|e: Error| e.to_string())?;
    let scenario = row.scenario.parse().map_err(|e: Error| e.to_string())?;
    if row.fps != FPS {
        return Err(format!("fps must be {FPS}, got {}", row.fps));
    }
    let path: PathBuf = dir.join(&row.file);
    if !path.is_file() {
        return Err(format!("file not found: {}", row.file));
    }
    let mut reader = csv::Reader::from_path(&path).map_err(|e| e.to_string())?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut columns = vec![];
    for name in sequence_header() {
        columns.push(find(&name).ok_or_else(|| format!("missing column `{name}`"))?);
    }

    let mut signals = vec![Vec::new(); INPUT_ROWS];
    let mut ref_hr = vec![];
    let mut prev: Option<i64> = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| e.to_string())?;
        let field = |col: usize| -> std::result::Result<&str, String> {
            record.get(columns[col]).map(str::trim).ok_or_else(|| format!("row {}: too few fields", line + 1))
        };
        let parse = |col: usize| -> std::result::Result<f64, String> {
            let s = field(col)?;
            s.parse::<f64>().map_err(|_| format!("row {}: `{s}` is not a number", line + 1))
        };
        let frame: i64 = field(0)?.parse().map_err(|_| format!("row {}: bad frame_index", line + 1))?;
        if prev.is_some_and(|p| frame != p + 1) {
            return Err(format!("non-contiguous frame_index at row {} ({frame} after {})", line + 1, prev.unwrap()));
        }
        prev = Some(frame);
        for (c, channel) in signals.iter_mut().enumerate() {
            let v = parse(c + 1)?;
            if !v.is_finite() {
                return Err(format!("row {}: non-finite color value", line + 1));
            }
            channel.push(v);
        }
        let hr = parse(INPUT_ROWS + 1)?;
        if !grid.contains(hr) {
            return Err("HR out of admissible range".into());
        }
        ref_hr.push(hr);
    }
    if ref_hr.len() < INPUT_FRAMES {
        return Err(format!("{} frames, fewer than one {INPUT_FRAMES}-frame window", ref_hr.len()));
    }
    let seq = ColorSignalSequence { id: row.id, camera, scenario, fps: row.fps, signals, ref_hr };
    seq.validate(grid).map_err(|e| e.to_string())?;
    Ok(seq)
}
