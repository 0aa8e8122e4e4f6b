//! CLEAR-MOT and identity metrics, and the MOTChallenge text format.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::assignment::{hungarian, BBox, CostMatrix};
use crate::error::{Error, Result};
use crate::model::FrameResult;
use crate::synthworld::SyntheticSequence;

/// One MOTChallenge row. Boxes are in pixels, `frame` is 1-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRow {
    pub frame: u32,
    pub id: u64,
    pub bb_left: f64,
    pub bb_top: f64,
    pub bb_width: f64,
    pub bb_height: f64,
    pub conf: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl TrackRow {
    pub fn new(frame: u32, id: u64, left: f64, top: f64, width: f64, height: f64) -> Self {
        Self {
            frame,
            id,
            bb_left: left,
            bb_top: top,
            bb_width: width,
            bb_height: height,
            conf: 1.0,
            x: -1.0,
            y: -1.0,
            z: -1.0,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_ltwh(self.bb_left, self.bb_top, self.bb_width, self.bb_height)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackFile {
    pub rows: Vec<TrackRow>,
}

impl TrackFile {
    pub fn new(rows: Vec<TrackRow>) -> Self {
        Self { rows }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows sorted by `(frame, id)`.
    pub fn sorted(&self) -> Self {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| (a.frame, a.id).cmp(&(b.frame, b.id)));
        Self { rows }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.rows {
            if r.frame == 0 {
                return Err(Error::Evaluation(format!("frame numbers start at 1, found 0 (id {})", r.id)));
            }
            if !seen.insert((r.frame, r.id)) {
                return Err(Error::Evaluation(format!("id {} appears twice in frame {}", r.id, r.frame)));
            }
        }
        Ok(())
    }
}

fn parse_field<T: core::str::FromStr>(s: &str, line: usize, name: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Data(format!("line {line}: bad {name} {:?}", s.trim())))
}

/// Parses comma-separated MOTChallenge rows. Blank lines are skipped; rows
/// with 6 to 10 fields are accepted, the missing tail taking the defaults
/// `conf = 1, x = y = z = −1`.
pub fn parse_mot(text: &str) -> Result<TrackFile> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 6 || f.len() > 10 {
            return Err(Error::Data(format!("line {n}: expected 6 to 10 fields, found {}", f.len())));
        }
        let frame: u32 = parse_field(f[0], n, "frame")?;
        if frame == 0 {
            return Err(Error::Data(format!("line {n}: frame numbers start at 1")));
        }
        let real = |k: usize, name: &str, default: f64| -> Result<f64> {
            match f.get(k) {
                Some(s) => {
                    let v: f64 = parse_field(s, n, name)?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(Error::Data(format!("line {n}: {name} is not finite")))
                    }
                }
                None => Ok(default),
            }
        };
        let row = TrackRow {
            frame,
            id: parse_field(f[1], n, "id")?,
            bb_left: real(2, "bb_left", 0.0)?,
            bb_top: real(3, "bb_top", 0.0)?,
            bb_width: real(4, "bb_width", 0.0)?,
            bb_height: real(5, "bb_height", 0.0)?,
            conf: real(6, "conf", 1.0)?,
            x: real(7, "x", -1.0)?,
            y: real(8, "y", -1.0)?,
            z: real(9, "z", -1.0)?,
        };
        if row.bb_width < 0.0 || row.bb_height < 0.0 {
            return Err(Error::Data(format!("line {n}: negative box extent")));
        }
        rows.push(row);
    }
    Ok(TrackFile { rows })
}

fn write_real(out: &mut String, v: f64) {
    if v == -1.0 {
        out.push_str("-1");
    } else {
        let _ = write!(out, "{v:.6}");
    }
}

/// Canonical text: box and confidence with six decimals, `x, y, z` as `-1`
/// when unset.
pub fn write_mot(file: &TrackFile) -> String {
    let mut out = String::new();
    for r in &file.rows {
        let _ = write!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},",
            r.frame, r.id, r.bb_left, r.bb_top, r.bb_width, r.bb_height, r.conf
        );
        write_real(&mut out, r.x);
        out.push(',');
        write_real(&mut out, r.y);
        out.push(',');
        write_real(&mut out, r.z);
        out.push('\n');
    }
    out
}

/// Rounds to the six decimals the text format keeps, so that in-memory files
/// equal their reparsed text.
pub fn round6(v: f64) -> f64 {
    libm::round(v * 1e6) / 1e6
}

fn pixel_row(frame: u32, id: u64, b: BBox, grid_w: usize, grid_h: usize) -> TrackRow {
    let [x1, y1, _, _] = b.corners();
    TrackRow::new(
        frame,
        id,
        round6(x1 * grid_w as f64),
        round6(y1 * grid_h as f64),
        round6(b.w * grid_w as f64),
        round6(b.h * grid_h as f64),
    )
}

/// Ground truth in grid-pixel units, occluded objects included.
pub fn ground_truth_file(seq: &SyntheticSequence) -> TrackFile {
    let rows = seq
        .ground_truth
        .iter()
        .enumerate()
        .flat_map(|(t, gts)| {
            gts.iter()
                .map(move |g| pixel_row(t as u32 + 1, g.identity, g.bbox, seq.grid_w, seq.grid_h))
        })
        .collect();
    TrackFile { rows }
}

/// Tracker output in grid-pixel units: every slot that carries an identity.
pub fn results_file(results: &[FrameResult], grid_w: usize, grid_h: usize) -> TrackFile {
    let mut rows = Vec::new();
    for r in results {
        for (id, b) in r.outputs() {
            let mut row = pixel_row(r.frame + 1, id, b, grid_w, grid_h);
            row.conf = round6(
                r.slots
                    .iter()
                    .find(|s| s.identity == Some(id))
                    .map_or(1.0, |s| s.object_prob),
            );
            rows.push(row);
        }
    }
    TrackFile { rows }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub name: String,
    pub mota: f64,
    pub idf1: f64,
    pub mt: usize,
    pub ml: usize,
    pub fp: usize,
    #[cfg_attr(feature = "serde", serde(rename = "fn"))]
    pub fn_: usize,
    pub ids: usize,
    /// Ground-truth boxes.
    pub num_gt: usize,
    /// Ground-truth trajectories.
    pub num_tracks: usize,
    pub num_hyp: usize,
    pub matches: usize,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

impl MetricReport {
    fn finish(mut self) -> Self {
        self.mota = mota(self.fp, self.fn_, self.ids, self.num_gt);
        self.idf1 = idf1(self.idtp, self.idfp, self.idfn);
        self
    }
}

/// `1 − (FP + FN + IDs) / ΣGT`.
pub fn mota(fp: usize, fn_: usize, ids: usize, num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if fp + fn_ + ids == 0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - (fp + fn_ + ids) as f64 / num_gt as f64
}

/// `2·IDTP / (2·IDTP + IDFP + IDFN)`, `1` when both sides are empty.
pub fn idf1(idtp: usize, idfp: usize, idfn: usize) -> f64 {
    let den = 2 * idtp + idfp + idfn;
    if den == 0 {
        1.0
    } else {
        (2 * idtp) as f64 / den as f64
    }
}

/// Coverage at or above which a trajectory is mostly tracked.
pub const MOSTLY_TRACKED: f64 = 0.8;
/// Coverage at or below which a trajectory is mostly lost.
pub const MOSTLY_LOST: f64 = 0.2;

type Frames<'a> = BTreeMap<u32, Vec<&'a TrackRow>>;

fn by_frame(f: &TrackFile) -> Frames<'_> {
    let mut m: Frames<'_> = BTreeMap::new();
    for r in &f.rows {
        m.entry(r.frame).or_default().push(r);
    }
    for v in m.values_mut() {
        v.sort_by_key(|r| r.id);
    }
    m
}

/// Cost standing for "not allowed" in the per-frame matching; larger than
/// any sum of admissible `1 − IoU` costs.
const FORBIDDEN: f64 = 1e6;

/// Evaluates one sequence.
///
/// Per frame, correspondences of the previous frame are kept while their IoU
/// stays at or above `iou_threshold`; the remaining objects and hypotheses
/// are paired by a minimum `1 − IoU` assignment among admissible pairs. A
/// ground-truth object matched to a different hypothesis than at its last
/// match counts an identity switch. IDF1 comes from the one-to-one pairing of
/// whole trajectories that maximizes the number of co-detected frames.
pub fn evaluate(name: &str, hyp: &TrackFile, gt: &TrackFile, iou_threshold: f64) -> Result<MetricReport> {
    hyp.validate()?;
    gt.validate()?;
    let hf = by_frame(hyp);
    let gf = by_frame(gt);
    let frames: BTreeSet<u32> = hf.keys().chain(gf.keys()).copied().collect();

    let mut report = MetricReport {
        name: name.into(),
        mota: 0.0,
        idf1: 0.0,
        mt: 0,
        ml: 0,
        fp: 0,
        fn_: 0,
        ids: 0,
        num_gt: gt.rows.len(),
        num_tracks: 0,
        num_hyp: hyp.rows.len(),
        matches: 0,
        idtp: 0,
        idfp: 0,
        idfn: 0,
    };
    let mut last_match: BTreeMap<u64, u64> = BTreeMap::new();
    let mut gt_len: BTreeMap<u64, usize> = BTreeMap::new();
    let mut gt_hit: BTreeMap<u64, usize> = BTreeMap::new();
    let mut hyp_len: BTreeMap<u64, usize> = BTreeMap::new();
    let mut co: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    let empty = Vec::new();

    for f in frames {
        let g = gf.get(&f).unwrap_or(&empty);
        let h = hf.get(&f).unwrap_or(&empty);
        for r in g {
            *gt_len.entry(r.id).or_default() += 1;
        }
        for r in h {
            *hyp_len.entry(r.id).or_default() += 1;
        }
        let iou: Vec<Vec<f64>> = g.iter().map(|a| h.iter().map(|b| a.bbox().iou(b.bbox())).collect()).collect();
        for (i, a) in g.iter().enumerate() {
            for (j, b) in h.iter().enumerate() {
                if iou[i][j] >= iou_threshold {
                    *co.entry((a.id, b.id)).or_default() += 1;
                }
            }
        }

        let mut g_used = vec![false; g.len()];
        let mut h_used = vec![false; h.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (i, a) in g.iter().enumerate() {
            if let Some(prev) = last_match.get(&a.id) {
                if let Some(j) = h.iter().position(|b| b.id == *prev) {
                    if !h_used[j] && iou[i][j] >= iou_threshold {
                        g_used[i] = true;
                        h_used[j] = true;
                        pairs.push((i, j));
                    }
                }
            }
        }
        let gi: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let hj: Vec<usize> = (0..h.len()).filter(|&j| !h_used[j]).collect();
        if !gi.is_empty() && !hj.is_empty() {
            let costs = CostMatrix::from_fn(gi.len(), hj.len(), |r, c| {
                let v = iou[gi[r]][hj[c]];
                Ok(if v >= iou_threshold { 1.0 - v } else { FORBIDDEN })
            })?;
            for (r, c) in hungarian(&costs).pairs {
                let (i, j) = (gi[r], hj[c]);
                if iou[i][j] >= iou_threshold {
                    if let Some(prev) = last_match.get(&g[i].id) {
                        if *prev != h[j].id {
                            report.ids += 1;
                        }
                    }
                    g_used[i] = true;
                    h_used[j] = true;
                    pairs.push((i, j));
                }
            }
        }
        for &(i, j) in &pairs {
            last_match.insert(g[i].id, h[j].id);
            *gt_hit.entry(g[i].id).or_default() += 1;
        }
        report.matches += pairs.len();
        report.fn_ += g_used.iter().filter(|u| !**u).count();
        report.fp += h_used.iter().filter(|u| !**u).count();
    }

    report.num_tracks = gt_len.len();
    for (id, &len) in &gt_len {
        let cover = *gt_hit.get(id).unwrap_or(&0) as f64 / len as f64;
        if cover >= MOSTLY_TRACKED {
            report.mt += 1;
        }
        if cover <= MOSTLY_LOST {
            report.ml += 1;
        }
    }

    let gids: Vec<u64> = gt_len.keys().copied().collect();
    let hids: Vec<u64> = hyp_len.keys().copied().collect();
    if !gids.is_empty() && !hids.is_empty() {
        let costs = CostMatrix::from_fn(gids.len(), hids.len(), |r, c| {
            Ok(-(*co.get(&(gids[r], hids[c])).unwrap_or(&0) as f64))
        })?;
        report.idtp = hungarian(&costs)
            .pairs
            .iter()
            .map(|&(r, c)| *co.get(&(gids[r], hids[c])).unwrap_or(&0))
            .sum();
    }
    report.idfn = report.num_gt - report.idtp;
    report.idfp = report.num_hyp - report.idtp;
    Ok(report.finish())
}

/// Sums the counts of several sequences; rates are recomputed from the sums.
pub fn aggregate(name: &str, reports: &[MetricReport]) -> MetricReport {
    let mut out = MetricReport {
        name: name.into(),
        mota: 0.0,
        idf1: 0.0,
        mt: 0,
        ml: 0,
        fp: 0,
        fn_: 0,
        ids: 0,
        num_gt: 0,
        num_tracks: 0,
        num_hyp: 0,
        matches: 0,
        idtp: 0,
        idfp: 0,
        idfn: 0,
    };
    for r in reports {
        out.mt += r.mt;
        out.ml += r.ml;
        out.fp += r.fp;
        out.fn_ += r.fn_;
        out.ids += r.ids;
        out.num_gt += r.num_gt;
        out.num_tracks += r.num_tracks;
        out.num_hyp += r.num_hyp;
        out.matches += r.matches;
        out.idtp += r.idtp;
        out.idfp += r.idfp;
        out.idfn += r.idfn;
    }
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_reference_row() {
        let f = parse_mot("1,3,10.0,20.0,5.0,8.0,1,-1,-1,-1").unwrap();
        assert_eq!(f.rows, [TrackRow::new(1, 3, 10.0, 20.0, 5.0, 8.0)]);
    }

    #[test]
    fn empty_text_is_an_empty_file() {
        assert!(parse_mot("").unwrap().is_empty());
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let e = parse_mot("1,1,0,0,1,1\n2,x,0,0,1,1\n").unwrap_err();
        assert!(format!("{e}").contains("line 2"), "{e}");
        let e = parse_mot("1,1,0,0\n").unwrap_err();
        assert!(format!("{e}").contains("line 1"), "{e}");
    }

    #[test]
    fn mota_substitution() {
        assert!((mota(1, 2, 1, 10) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn duplicate_rows_are_rejected() {
        let r = TrackRow::new(1, 1, 0.0, 0.0, 2.0, 2.0);
        let f = TrackFile::new(vec![r, r]);
        assert!(matches!(evaluate("x", &f, &f, 0.5), Err(Error::Evaluation(_))));
    }
}
