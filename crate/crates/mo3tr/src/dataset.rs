//! On-disk synthetic sequences: `<name>.scene.json` (header, scenario and
//! ground truth), `<name>.frames.bin` (little-endian f32, frame-major then
//! cell-major then channel) and `<name>.gt.txt` (MOTChallenge ground truth).

use crate::error::{self, CliError, Result};
use mo3tr_core::motmetrics::{ground_truth_file, write_mot};
use mo3tr_core::synthworld::{GtObject, RenderedFrame, ScenarioSpec, SyntheticSequence};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCENE_FORMAT: &str = "mo3tr-scene";
pub const SCENE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SceneHeader {
    format: String,
    version: u32,
    name: String,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    frames: usize,
    scenario: Option<ScenarioSpec>,
    ground_truth: Vec<Vec<GtObject>>,
}

pub fn scene_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.scene.json"))
}

pub fn frames_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.frames.bin"))
}

pub fn gt_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.gt.txt"))
}

pub fn encode_frames(seq: &SyntheticSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(seq.len() * seq.cells() * seq.channels * 4);
    for f in &seq.frames {
        for v in &f.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn scene_json(seq: &SyntheticSequence, scenario: Option<&ScenarioSpec>) -> String {
    let header = SceneHeader {
        format: SCENE_FORMAT.into(),
        version: SCENE_VERSION,
        name: seq.name.clone(),
        grid_h: seq.grid_h,
        grid_w: seq.grid_w,
        channels: seq.channels,
        frames: seq.len(),
        scenario: scenario.cloned(),
        ground_truth: seq.ground_truth.clone(),
    };
    let mut s = serde_json::to_string_pretty(&header).expect("scene header serializes");
    s.push('\n');
    s
}

/// Writes the three files of `seq` into `dir`.
pub fn write_sequence(dir: &Path, seq: &SyntheticSequence, scenario: Option<&ScenarioSpec>) -> Result<()> {
    error::write(&scene_path(dir, &seq.name), scene_json(seq, scenario))?;
    error::write(&frames_path(dir, &seq.name), encode_frames(seq))?;
    error::write(&gt_path(dir, &seq.name), write_mot(&ground_truth_file(seq)))
}

/// Accepts `<dir>/<name>.scene.json`, `<dir>/<name>.frames.bin` or the bare
/// `<dir>/<name>` prefix.
pub fn split_sequence_path(path: &Path) -> Result<(PathBuf, String)> {
    let file = path
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| CliError::format(path, "not a sequence path"))?;
    let name = file
        .strip_suffix(".scene.json")
        .or_else(|| file.strip_suffix(".frames.bin"))
        .unwrap_or(file);
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, name.to_string()))
}

pub struct LoadedSequence {
    pub sequence: SyntheticSequence,
    pub scenario: Option<ScenarioSpec>,
}

pub fn read_sequence(path: &Path) -> Result<LoadedSequence> {
    let (dir, name) = split_sequence_path(path)?;
    let sp = scene_path(&dir, &name);
    let header: SceneHeader =
        serde_json::from_str(&error::read_to_string(&sp)?).map_err(|e| CliError::format(&sp, e.to_string()))?;
    if header.format != SCENE_FORMAT || header.version != SCENE_VERSION {
        return Err(CliError::format(
            &sp,
            format!("expected {SCENE_FORMAT} v{SCENE_VERSION}, got {} v{}", header.format, header.version),
        ));
    }
    if header.ground_truth.len() != header.frames {
        return Err(CliError::format(
            &sp,
            format!("{} ground-truth frames for {} frames", header.ground_truth.len(), header.frames),
        ));
    }
    let fp = frames_path(&dir, &name);
    let bytes = error::read_bytes(&fp)?;
    let per_frame = header.grid_h * header.grid_w * header.channels;
    if bytes.len() != header.frames * per_frame * 4 {
        return Err(CliError::format(
            &fp,
            format!(
                "{} bytes, expected {} frames of {}x{}x{} f32",
                bytes.len(),
                header.frames,
                header.grid_h,
                header.grid_w,
                header.channels
            ),
        ));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let frames = if per_frame == 0 {
        vec![RenderedFrame { data: Vec::new() }; header.frames]
    } else {
        values.chunks(per_frame).map(|c| RenderedFrame { data: c.to_vec() }).collect()
    };
    Ok(LoadedSequence {
        sequence: SyntheticSequence {
            name: header.name,
            grid_h: header.grid_h,
            grid_w: header.grid_w,
            channels: header.channels,
            frames,
            ground_truth: header.ground_truth,
        },
        scenario: header.scenario,
    })
}

/// All sequences of `dir`, sorted by name.
pub fn read_dir(dir: &Path) -> Result<Vec<SyntheticSequence>> {
    let entries = std::fs::read_dir(dir).map_err(|e| error::io_error(dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|e| error::io_error(dir, e))?;
        if let Some(n) = e.file_name().to_str().and_then(|f| f.strip_suffix(".scene.json")) {
            names.push(n.to_string());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(CliError::format(dir, "no *.scene.json sequences"));
    }
    names
        .iter()
        .map(|n| read_sequence(&scene_path(dir, n)).map(|l| l.sequence))
        .collect()
}
