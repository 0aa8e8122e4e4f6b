//! The operator commands, callable from the binary and from tests.

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{self, CliError, Result};
use crate::output::{self, AblationRow};
use mo3tr_core::model::{FilterMode, FrameResult, Mo3tr};
use mo3tr_core::motmetrics::{aggregate, evaluate, ground_truth_file, results_file, MetricReport, TrackFile};
use mo3tr_core::synthworld::{standard_suites, suite, Suite, SyntheticSequence};
use mo3tr_core::training::{train, LossRecord};
use std::path::{Path, PathBuf};

pub fn find_suite(name: &str) -> Result<Suite> {
    suite(name).ok_or_else(|| {
        let known: Vec<String> = standard_suites().into_iter().map(|s| s.name).collect();
        CliError::Schema(format!("unknown suite {name:?}; known: {}", known.join(", ")))
    })
}

/// Writes every sequence of `suite_name` into `out_dir`; returns the names.
pub fn gen(suite_name: &str, out_dir: &Path) -> Result<Vec<String>> {
    let s = find_suite(suite_name)?;
    let seqs = s.generate()?;
    for (seq, spec) in seqs.iter().zip(&s.scenarios) {
        dataset::write_sequence(out_dir, seq, Some(spec))?;
    }
    Ok(seqs.into_iter().map(|s| s.name).collect())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_name().and_then(|f| f.to_str()).unwrap_or("checkpoint");
    let stem = stem.strip_suffix(".json").unwrap_or(stem);
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Files written by [`train_run`] next to the checkpoint.
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub stage1_checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub config: PathBuf,
}

impl TrainOutputs {
    pub fn for_checkpoint(checkpoint: &Path) -> Self {
        Self {
            checkpoint: checkpoint.to_path_buf(),
            stage1_checkpoint: sibling(checkpoint, "stage1.json"),
            loss_csv: sibling(checkpoint, "loss.csv"),
            config: sibling(checkpoint, "config.txt"),
        }
    }
}

fn check_grid(cfg: &RunConfig, seq: &SyntheticSequence) -> Result<()> {
    let m = &cfg.model;
    if (seq.grid_h, seq.grid_w, seq.channels) != (m.grid_h, m.grid_w, m.channels) {
        return Err(CliError::DimensionMismatch(format!(
            "sequence {} is {}x{}x{} but the model expects {}x{}x{}",
            seq.name, seq.grid_h, seq.grid_w, seq.channels, m.grid_h, m.grid_w, m.channels
        )));
    }
    Ok(())
}

/// Both training stages on `data`. Writes the stage-1 and final
/// checkpoints, the loss curve and the effective config.
pub fn train_run(
    cfg: &RunConfig,
    data: &[SyntheticSequence],
    checkpoint: &Path,
    mut progress: impl FnMut(&LossRecord),
) -> Result<(Mo3tr, Vec<LossRecord>)> {
    for seq in data {
        check_grid(cfg, seq)?;
    }
    let outs = TrainOutputs::for_checkpoint(checkpoint);
    error::write(&outs.config, cfg.echo())?;
    let mut model = Mo3tr::new(cfg.model.clone())?;
    let stage1_end = cfg.train.stage1_epochs;
    let mut io_err = None;
    let curve = train(&mut model, data, &cfg.train, |r, m| {
        progress(r);
        if r.stage == 1 && r.epoch + 1 == stage1_end {
            if let Err(e) = Checkpoint::capture(m, Some(&cfg.train), 1).save(&outs.stage1_checkpoint) {
                io_err = Some(e);
            }
        }
        Ok(())
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    error::write(&outs.loss_csv, output::loss_csv(&curve))?;
    let stage = if cfg.train.stage2_epochs > 0 { 2 } else { 1 };
    Checkpoint::capture(&model, Some(&cfg.train), stage).save(checkpoint)?;
    Ok((model, curve))
}

#[derive(Clone, Debug, Default)]
pub struct TrackOptions {
    pub history_cap: Option<usize>,
    pub public_detections: Option<PathBuf>,
    pub filter: Option<FilterMode>,
    pub filter_threshold: Option<f64>,
    pub dump_attention: Option<PathBuf>,
    pub dump_embeddings: Option<PathBuf>,
}

/// Loads a checkpoint, checking it against the architecture in `cfg` when
/// the config names one explicitly.
pub fn load_model(checkpoint: &Path, cfg: Option<&RunConfig>) -> Result<Mo3tr> {
    let ck = Checkpoint::load(checkpoint)?;
    if let Some(cfg) = cfg {
        cfg.check_model(&ck.model)?;
    }
    ck.restore()
}

pub fn track_sequence(model: &Mo3tr, seq: &SyntheticSequence, opts: &TrackOptions) -> Result<(TrackFile, Vec<FrameResult>)> {
    let mc = &model.config;
    if (seq.grid_h, seq.grid_w, seq.channels) != (mc.grid_h, mc.grid_w, mc.channels) {
        return Err(CliError::DimensionMismatch(format!(
            "sequence {} is {}x{}x{} but the checkpoint expects {}x{}x{}",
            seq.name, seq.grid_h, seq.grid_w, seq.channels, mc.grid_h, mc.grid_w, mc.channels
        )));
    }
    let cap = opts.history_cap.unwrap_or(mc.temporal_window);
    if cap == 0 || cap > mc.temporal_window {
        return Err(CliError::Schema(format!(
            "history cap must lie in 1..={}, got {cap}",
            mc.temporal_window
        )));
    }
    let dets = match &opts.public_detections {
        Some(p) => Some(output::read_detections(p, seq.len(), seq.grid_w, seq.grid_h)?),
        None => None,
    };
    if dets.is_none() && opts.filter.is_some() {
        return Err(CliError::Schema("--filter needs --public-dets".into()));
    }
    let mode = opts.filter.unwrap_or(FilterMode::CenterDistance);
    let threshold = opts.filter_threshold.unwrap_or(mode.default_threshold());
    let results = model.track_sequence(
        seq.frames.iter().map(|f| f.data.as_slice()),
        cap,
        dets.as_deref().map(|d| (d, mode, threshold)),
        opts.dump_attention.is_some(),
    )?;
    if let Some(p) = &opts.dump_attention {
        error::write(p, output::attention_csv(&results, cap, mc.right_align))?;
    }
    if let Some(p) = &opts.dump_embeddings {
        error::write(p, output::embeddings_csv(&results, mc.d_model))?;
    }
    Ok((results_file(&results, seq.grid_w, seq.grid_h), results))
}

/// Tracks the sequence at `sequence` and writes the MOTChallenge result.
pub fn track(checkpoint: &Path, sequence: &Path, out: &Path, opts: &TrackOptions, cfg: Option<&RunConfig>) -> Result<TrackFile> {
    let model = load_model(checkpoint, cfg)?;
    let seq = dataset::read_sequence(sequence)?.sequence;
    let (file, _) = track_sequence(&model, &seq, opts)?;
    output::write_mot_file(out, &file)?;
    if let Some(cfg) = cfg {
        error::write(&out.with_file_name("config.txt"), cfg.echo())?;
    }
    Ok(file)
}

pub fn eval(hyp: &Path, gt: &Path, iou_threshold: f64) -> Result<MetricReport> {
    let h = output::read_mot(hyp)?;
    let g = output::read_mot(gt)?;
    let name = gt
        .file_name()
        .and_then(|f| f.to_str())
        .map(|f| f.strip_suffix(".gt.txt").or(f.strip_suffix(".txt")).unwrap_or(f))
        .unwrap_or("sequence");
    Ok(evaluate(name, &h, &g, iou_threshold)?)
}

/// Per-sequence reports and their aggregate for one tracking setting.
pub fn evaluate_suite(model: &Mo3tr, data: &[SyntheticSequence], opts: &TrackOptions, iou_threshold: f64) -> Result<(Vec<MetricReport>, MetricReport)> {
    let mut reports = Vec::new();
    for seq in data {
        let (hyp, _) = track_sequence(model, seq, opts)?;
        reports.push(evaluate(&seq.name, &hyp, &ground_truth_file(seq), iou_threshold)?);
    }
    let agg = aggregate("all", &reports);
    Ok((reports, agg))
}

/// Tracks every sequence at each history cap and aggregates the metrics.
pub fn ablate(model: &Mo3tr, data: &[SyntheticSequence], caps: &[usize], iou_threshold: f64) -> Result<Vec<AblationRow>> {
    caps.iter()
        .map(|&cap| {
            let opts = TrackOptions {
                history_cap: Some(cap),
                ..TrackOptions::default()
            };
            let (_, report) = evaluate_suite(model, data, &opts, iou_threshold)?;
            Ok(AblationRow {
                history_cap: cap,
                report: MetricReport {
                    name: format!("cap{cap}"),
                    ..report
                },
            })
        })
        .collect()
}
