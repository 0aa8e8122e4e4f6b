//! Text outputs: MOTChallenge files, CSV dumps and metric reports.

use crate::error::{self, CliError, Result};
use mo3tr_core::model::{Detection, FrameResult};
use mo3tr_core::motmetrics::{parse_mot, write_mot, MetricReport, TrackFile};
use mo3tr_core::training::LossRecord;
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

pub fn read_mot(path: &Path) -> Result<TrackFile> {
    let text = error::read_to_string(path)?;
    parse_mot(&text).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_mot_file(path: &Path, file: &TrackFile) -> Result<()> {
    error::write(path, write_mot(file))
}

/// Public detections from a MOTChallenge `det.txt` in grid pixels, grouped
/// per 0-based frame and normalized by the grid size.
pub fn read_detections(path: &Path, frames: usize, grid_w: usize, grid_h: usize) -> Result<Vec<Vec<Detection>>> {
    let file = read_mot(path)?;
    let (w, h) = (grid_w as f64, grid_h as f64);
    let mut out = vec![Vec::new(); frames];
    for r in &file.rows {
        let t = r.frame as usize - 1;
        if t >= frames {
            return Err(CliError::format(
                path,
                format!("detection at frame {} but the sequence has {frames} frames", r.frame),
            ));
        }
        out[t].push(Detection {
            x1: r.bb_left / w,
            y1: r.bb_top / h,
            x2: (r.bb_left + r.bb_width) / w,
            y2: (r.bb_top + r.bb_height) / h,
            confidence: r.conf,
        });
    }
    Ok(out)
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("epoch,stage,loss_total,loss_ce,loss_l1,loss_giou\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch + 1, r.stage, r.total, r.ce, r.l1, r.giou);
    }
    s
}

/// Temporal attention rows. `history_slot` is the column of the attended
/// entry in a window of `cap` columns whose last column is the frame before
/// the current one; frames are 1-based.
pub fn attention_csv(results: &[FrameResult], cap: usize, right_align: bool) -> String {
    let mut s = String::from("frame,identity,layer,head,history_slot,weight\n");
    for fr in results {
        for a in &fr.attention {
            let n = a.frames.len();
            for (l, heads) in a.weights.iter().enumerate() {
                for (h, row) in heads.iter().enumerate() {
                    for (k, (&f, w)) in a.frames.iter().zip(row).enumerate() {
                        let slot = if right_align {
                            cap as i64 - (fr.frame as i64 - f as i64)
                        } else {
                            (cap - n + k) as i64
                        };
                        let _ = writeln!(s, "{},{},{l},{h},{slot},{w}", fr.frame + 1, a.identity);
                    }
                }
            }
        }
    }
    s
}

/// `identity,frame,z0,...` for every reported track state.
pub fn embeddings_csv(results: &[FrameResult], d: usize) -> String {
    let mut s = String::from("identity,frame");
    for i in 0..d {
        let _ = write!(s, ",z{i}");
    }
    s.push('\n');
    for fr in results {
        for slot in &fr.slots {
            if let Some(id) = slot.identity {
                let _ = write!(s, "{id},{}", fr.frame + 1);
                for v in &slot.embedding {
                    let _ = write!(s, ",{v}");
                }
                s.push('\n');
            }
        }
    }
    s
}

fn fmt_ratio(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "-inf".into()
    }
}

/// Aligned text table; the aggregate row, when given, comes last.
pub fn report_table(rows: &[MetricReport], aggregate: Option<&MetricReport>) -> String {
    let all: Vec<&MetricReport> = rows.iter().chain(aggregate).collect();
    let name_w = all.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
    let mut s = format!(
        "{:<name_w$} {:>7} {:>7} {:>4} {:>4} {:>6} {:>6} {:>5} {:>6}\n",
        "sequence", "MOTA", "IDF1", "MT", "ML", "FP", "FN", "IDs", "GT"
    );
    for r in all {
        let _ = writeln!(
            s,
            "{:<name_w$} {:>7} {:>7} {:>4} {:>4} {:>6} {:>6} {:>5} {:>6}",
            r.name,
            fmt_ratio(r.mota),
            fmt_ratio(r.idf1),
            r.mt,
            r.ml,
            r.fp,
            r.fn_,
            r.ids,
            r.num_gt
        );
    }
    s
}

#[derive(Serialize)]
struct ReportJson<'a> {
    sequences: &'a [MetricReport],
    aggregate: Option<&'a MetricReport>,
}

pub fn report_json(rows: &[MetricReport], aggregate: Option<&MetricReport>) -> String {
    let mut s = serde_json::to_string_pretty(&ReportJson { sequences: rows, aggregate }).expect("report serializes");
    s.push('\n');
    s
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub history_cap: usize,
    pub report: MetricReport,
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:>4} {:>7} {:>7} {:>6} {:>6} {:>5}\n",
        "cap", "MOTA", "IDF1", "FP", "FN", "IDs"
    );
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{:>4} {:>7} {:>7} {:>6} {:>6} {:>5}",
            r.history_cap,
            fmt_ratio(m.mota),
            fmt_ratio(m.idf1),
            m.fp,
            m.fn_,
            m.ids
        );
    }
    s
}

pub fn ablation_json(rows: &[AblationRow]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("ablation serializes");
    s.push('\n');
    s
}
