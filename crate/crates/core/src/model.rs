//! The per-frame tracker: temporal prediction of every open track, joint
//! spatial decoding with the initiation queries, heads, and the track update.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assignment::BBox;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::trackstore::{Embedding, TrackSet, RETENTION_THRESHOLD};
use crate::transformer::{pe_grid, pe_time, Dims, Heads, Linear, SpatialTransformer, TemporalTransformer, OBJECT_CLASS};

/// Where the initiation slots come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum QueryMode {
    /// A fixed learned set, identical on every frame.
    Learned,
    /// The encoder cells with the highest object score of a cell classifier.
    TopK,
}

impl QueryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QueryMode::Learned => "learned",
            QueryMode::TopK => "top-k",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(QueryMode::Learned),
            "top-k" | "topk" => Ok(QueryMode::TopK),
            _ => Err(Error::Config(format!("unknown query mode {s:?} (learned | top-k)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub temporal_layers: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_queries: usize,
    pub query_mode: QueryMode,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// Longest history span, in frames, that the temporal encoding covers.
    pub temporal_window: usize,
    /// Encode history entries by their frame distance; when off, entries are
    /// packed consecutively and gaps are invisible to the temporal model.
    pub right_align: bool,
    /// Consecutive misses before an open track is closed.
    pub patience: u32,
    pub seed: u64,
}

impl ModelConfig {
    /// The published configuration.
    pub fn paper() -> Self {
        Self {
            d_model: 256,
            heads: 8,
            ffn_hidden: 1024,
            temporal_layers: 3,
            encoder_layers: 6,
            decoder_layers: 6,
            num_queries: 100,
            query_mode: QueryMode::Learned,
            grid_h: 16,
            grid_w: 16,
            channels: 8,
            temporal_window: 30,
            right_align: true,
            patience: 5,
            seed: 0,
        }
    }

    /// Small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            ffn_hidden: 64,
            temporal_layers: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            num_queries: 12,
            ..Self::paper()
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            d_model: self.d_model,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return bad(format!("model.d_model must be a positive multiple of 4, got {}", self.d_model));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("model.d_model {} is not divisible by model.heads {}", self.d_model, self.heads));
        }
        if self.ffn_hidden == 0 || self.num_queries == 0 {
            return bad("model.ffn_hidden and model.num_queries must be positive".into());
        }
        if self.temporal_layers == 0 || self.decoder_layers == 0 {
            return bad("model.temporal_layers and model.decoder_layers must be positive".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 {
            return bad("model grid and channels must be positive".into());
        }
        if self.temporal_window == 0 || self.patience == 0 {
            return bad("model.temporal_window and model.patience must be positive".into());
        }
        Ok(())
    }
}

/// Public detections of one frame, normalized corner format.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
}

impl Detection {
    pub fn bbox(&self) -> BBox {
        BBox::new(
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.x2 - self.x1,
            self.y2 - self.y1,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilterMode {
    /// Center distance within `threshold · max(w, h)` of the candidate.
    CenterDistance,
    /// IoU at least `threshold`.
    Iou,
}

impl FilterMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cd" => Ok(FilterMode::CenterDistance),
            "iou" => Ok(FilterMode::Iou),
            _ => Err(Error::Config(format!("unknown filter {s:?} (cd | iou)"))),
        }
    }

    pub fn default_threshold(self) -> f64 {
        match self {
            FilterMode::CenterDistance => 1.0,
            FilterMode::Iou => 0.5,
        }
    }
}

/// Indices of the candidates licensed by a detection, each detection
/// licensing at most one. Pairs are taken greedily, nearest (or most
/// overlapping) first. Returned in ascending candidate order.
pub fn filter_initiations(candidates: &[BBox], detections: &[Detection], mode: FilterMode, threshold: f64) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        for (j, d) in detections.iter().enumerate() {
            let db = d.bbox();
            match mode {
                FilterMode::CenterDistance => {
                    let dist = libm::hypot(c.cx - db.cx, c.cy - db.cy);
                    if dist <= threshold * c.w.max(c.h) {
                        pairs.push((dist, i, j));
                    }
                }
                FilterMode::Iou => {
                    let iou = c.iou(db);
                    if iou >= threshold {
                        pairs.push((-iou, i, j));
                    }
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut cand_used = vec![false; candidates.len()];
    let mut det_used = vec![false; detections.len()];
    for (_, i, j) in pairs {
        if !cand_used[i] && !det_used[j] {
            cand_used[i] = true;
            det_used[j] = true;
        }
    }
    (0..candidates.len()).filter(|&i| cand_used[i]).collect()
}

/// Indices of the `k` highest scores in descending order; equal scores keep
/// scan order. `k` is clipped to the number of scores.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k.min(scores.len()));
    idx
}

/// History of one track as input to a frame pass.
#[derive(Clone, Debug)]
pub struct TrackInput {
    pub identity: u64,
    /// `(frame, embedding)`, oldest first, all strictly before the frame.
    pub history: Vec<(u32, Embedding)>,
}

/// Usable histories of the open tracks of `tracks` at frame `t`: the entries
/// falling inside the right-aligned window. Tracks without any are returned
/// separately.
pub fn track_inputs(tracks: &TrackSet, t: u32) -> (Vec<TrackInput>, Vec<u64>) {
    let view = tracks.right_align(t);
    let mut inputs = Vec::new();
    let mut empty = Vec::new();
    for row in view.rows {
        let history: Vec<(u32, Embedding)> = row
            .cells
            .into_iter()
            .enumerate()
            .filter_map(|(j, c)| c.map(|e| ((view.first_frame + j as i64) as u32, e)))
            .collect();
        if history.is_empty() {
            empty.push(row.identity);
        } else {
            inputs.push(TrackInput {
                identity: row.identity,
                history,
            });
        }
    }
    (inputs, empty)
}

/// Slot kind in a frame pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Tracked(u64),
    Initiation,
}

/// Temporal attention of one track in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalAttention {
    pub identity: u64,
    /// Frames of the attended history entries.
    pub frames: Vec<u32>,
    /// `[layer][head]` weights over `frames`.
    pub weights: Vec<Vec<Vec<f64>>>,
}

/// Everything a frame pass produces, still on the tape.
pub struct FramePass<'t> {
    pub kinds: Vec<SlotKind>,
    /// `slots × d` refined embeddings.
    pub embeddings: Var<'t>,
    pub logits: Var<'t>,
    pub probs: Var<'t>,
    pub boxes: Var<'t>,
    /// Per tracked slot, the boxes predicted straight from the temporal
    /// output for `t, t + 1, …, t + horizon − 1`.
    pub rollout: Vec<Var<'t>>,
    /// Per-cell object/background logits of the cell classifier.
    pub cell_logits: Var<'t>,
    /// Cells chosen as initiation slots in top-k mode.
    pub chosen_cells: Vec<usize>,
    pub temporal_weights: Vec<Vec<Vec<Var<'t>>>>,
}

impl FramePass<'_> {
    pub fn num_tracked(&self) -> usize {
        self.kinds.iter().filter(|k| matches!(k, SlotKind::Tracked(_))).count()
    }
}

#[derive(Clone, Debug)]
pub struct Mo3tr {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub temporal: TemporalTransformer,
    pub spatial: SpatialTransformer,
    pub heads: Heads,
    pub cell_classifier: Linear,
    pub queries: ParamId,
    pub query_pos: ParamId,
    pub init_pos: ParamId,
    pub track_pos: ParamId,
    grid_pe: Tensor,
}

/// One slot of a tracked frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotResult {
    pub kind: SlotKind,
    /// Identity carried after the update: the track for a retained tracked
    /// slot, the new track for a spawned initiation, `None` for background.
    pub identity: Option<u64>,
    pub object_prob: f64,
    pub bbox: BBox,
    pub embedding: Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub frame: u32,
    pub slots: Vec<SlotResult>,
    pub spawned: Vec<u64>,
    pub terminated: Vec<u64>,
    pub attention: Vec<TemporalAttention>,
}

impl FrameResult {
    /// `(identity, box)` of every track that reported this frame.
    pub fn outputs(&self) -> Vec<(u64, BBox)> {
        let mut out: Vec<(u64, BBox)> = self
            .slots
            .iter()
            .filter_map(|s| s.identity.map(|id| (id, s.bbox)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct StepOptions<'a> {
    /// Detections licensing initiations, with mode and threshold.
    pub public_detections: Option<(&'a [Detection], FilterMode, f64)>,
    pub dump_attention: bool,
}

impl Mo3tr {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let dims = config.dims();
        let d = config.d_model;
        let temporal = TemporalTransformer::new(&mut store, rng, "temporal", dims, config.temporal_layers)?;
        let spatial = SpatialTransformer::new(
            &mut store,
            rng,
            "spatial",
            dims,
            config.channels,
            config.encoder_layers,
            config.decoder_layers,
        )?;
        let heads = Heads::new(&mut store, rng, "heads", d);
        let cell_classifier = Linear::new(&mut store, rng, "cells.class", d, 2);
        let queries = store.add_xavier("queries", config.num_queries, d, rng);
        let query_pos = store.add_xavier("query_pos", config.num_queries, d, rng);
        let init_pos = store.add_xavier("init_pos", 1, d, rng);
        let track_pos = store.add_xavier("track_pos", 1, d, rng);
        let grid_pe = pe_grid(config.grid_h, config.grid_w, d);
        Ok(Self {
            config,
            store,
            temporal,
            spatial,
            heads,
            cell_classifier,
            queries,
            query_pos,
            init_pos,
            track_pos,
            grid_pe,
        })
    }

    pub fn grid_pe(&self) -> &Tensor {
        &self.grid_pe
    }

    /// Frame pixels (`H·W·C`, cell-major) as a `cells × C` tensor.
    pub fn frame_tensor(&self, frame: &[f32]) -> Result<Tensor> {
        let c = &self.config;
        if frame.len() != c.cells() * c.channels {
            return Err(Error::Config(format!(
                "frame has {} values, model expects {}x{}x{}",
                frame.len(),
                c.grid_h,
                c.grid_w,
                c.channels
            )));
        }
        Tensor::new(c.cells(), c.channels, frame.iter().map(|&v| v as f64).collect())
    }

    /// Encoded `(H·W) × d` grid with the 2-D positional field.
    pub fn encode_frame<'t>(&self, b: &Binding<'t, '_>, frame: &[f32]) -> Result<Var<'t>> {
        let cells = b.tape().constant(self.frame_tensor(frame)?);
        let pe = b.tape().constant(self.grid_pe.clone());
        self.spatial.encode(b, cells, pe)
    }

    /// Position of frame `f` when predicting for frame `t`.
    fn position(&self, t: u32, f: u32) -> Result<usize> {
        let w = self.config.temporal_window;
        let age = (t - f) as usize;
        if f >= t || age > w {
            return Err(Error::Usage(format!("history frame {f} outside the window of frame {t}")));
        }
        Ok(w - age)
    }

    /// Predicted embeddings of one track for frames `t .. t + horizon`.
    pub fn temporal_predict<'t>(
        &self,
        b: &Binding<'t, '_>,
        history: &[(u32, Embedding)],
        t: u32,
        horizon: usize,
    ) -> Result<crate::transformer::TemporalOutput<'t>> {
        if history.is_empty() {
            return Err(Error::EmptyContext("temporal_predict"));
        }
        let d = self.config.d_model;
        let mut positions = history
            .iter()
            .map(|(f, _)| self.position(t, *f))
            .collect::<Result<Vec<_>>>()?;
        if !self.config.right_align {
            let (w, n) = (self.config.temporal_window, positions.len());
            for (k, p) in positions.iter_mut().enumerate() {
                *p = w - (n - k).min(w);
            }
        }
        let mut data = Vec::with_capacity(history.len() * d);
        for (_, e) in history {
            if e.len() != d {
                return Err(Error::Dimension {
                    op: "temporal_predict",
                    lhs: vec![e.len()],
                    rhs: vec![d],
                });
            }
            data.extend_from_slice(e);
        }
        let hist = b.tape().constant(Tensor::new(history.len(), d, data)?);
        let w = self.config.temporal_window;
        let targets: Vec<usize> = (0..horizon.max(1)).map(|h| w + h).collect();
        self.temporal.predict(b, hist, &positions, None, &targets)
    }

    /// The grid positional field evaluated at the center of `b`, in the
    /// same layout as the rows of [`pe_grid`].
    pub fn box_position(&self, b: BBox) -> Vec<f64> {
        let c = &self.config;
        let half = c.d_model / 2;
        let mut v = pe_time(b.cy * c.grid_h as f64 - 0.5, half);
        v.extend(pe_time(b.cx * c.grid_w as f64 - 0.5, half));
        v
    }

    /// Runs one frame: temporal prediction for `tracks`, initiation slots,
    /// spatial decoding and the heads. A tracked slot's position is the
    /// learned track row, plus the grid field at the center of the box
    /// regressed from its temporal prediction, plus the sinusoid of its
    /// history age (frames since its oldest usable entry). The age keeps a
    /// long-standing track and a late duplicate of it distinguishable. `horizon ≥ 1` controls how many
    /// future boxes are regressed per track.
    pub fn forward_frame<'t>(
        &self,
        b: &Binding<'t, '_>,
        tracks: &[TrackInput],
        frame: &[f32],
        t: u32,
        horizon: usize,
    ) -> Result<FramePass<'t>> {
        let grid = self.encode_frame(b, frame)?;
        self.decode_frame(b, grid, tracks, t, horizon)
    }

    pub fn decode_frame<'t>(
        &self,
        b: &Binding<'t, '_>,
        grid: Var<'t>,
        tracks: &[TrackInput],
        t: u32,
        horizon: usize,
    ) -> Result<FramePass<'t>> {
        let mut kinds = Vec::new();
        let mut slots = Vec::new();
        let mut rollout = Vec::new();
        let mut temporal_weights = Vec::new();
        for track in tracks {
            let out = self.temporal_predict(b, &track.history, t, horizon)?;
            let current = if out.embeddings.rows() == 1 {
                out.embeddings
            } else {
                out.embeddings.slice_rows(0, 1)?
            };
            slots.push(current);
            rollout.push(self.heads.boxes(b, out.embeddings)?);
            temporal_weights.push(out.weights);
            kinds.push(SlotKind::Tracked(track.identity));
        }
        let n_tracked = slots.len();

        let cell_logits = self.cell_classifier.forward(b, grid)?;
        let (initiation, init_pos, chosen_cells) = match self.config.query_mode {
            QueryMode::Learned => (b.var(self.queries), b.var(self.query_pos), Vec::new()),
            QueryMode::TopK => {
                let scores: Vec<f64> = cell_logits.with_value(|l| {
                    (0..l.rows()).map(|r| l.get(r, OBJECT_CLASS) - l.get(r, 1 - OBJECT_CLASS)).collect()
                });
                let chosen = top_k(&scores, self.config.num_queries);
                let q = grid.gather_rows(&chosen)?;
                let pos = b.var(self.init_pos).gather_rows(&vec![0; chosen.len()])?;
                (q, pos, chosen)
            }
        };
        kinds.extend(core::iter::repeat_n(SlotKind::Initiation, initiation.rows()));
        slots.push(initiation);
        let slot_matrix = Var::concat_rows(&slots)?;
        let slot_pos = if n_tracked > 0 {
            let d = self.config.d_model;
            let mut fixed = Vec::with_capacity(n_tracked * d);
            for (tr, boxes) in tracks.iter().zip(&rollout) {
                let age = pe_time((t - tr.history[0].0) as f64, d);
                let anchor = boxes.with_value(|v| self.box_position(BBox::from_slice(v.row_slice(0))));
                fixed.extend(age.iter().zip(&anchor).map(|(a, p)| a + p));
            }
            let fixed = b.tape().constant(Tensor::new(n_tracked, d, fixed)?);
            let tp = b.var(self.track_pos).gather_rows(&vec![0; n_tracked])?.add(fixed)?;
            Var::concat_rows(&[tp, init_pos])?
        } else {
            init_pos
        };
        let decoded = self.spatial.decode(b, slot_matrix, Some(slot_pos), grid)?;
        let heads = self.heads.apply(b, decoded.embeddings)?;
        Ok(FramePass {
            kinds,
            embeddings: decoded.embeddings,
            logits: heads.logits,
            probs: heads.probs,
            boxes: heads.boxes,
            rollout,
            cell_logits,
            chosen_cells,
            temporal_weights,
        })
    }

    /// Tracks one frame and updates `tracks` in place.
    pub fn step(&self, tracks: &mut TrackSet, frame: &[f32], t: u32, opts: &StepOptions<'_>) -> Result<FrameResult> {
        let (inputs, stale) = track_inputs(tracks, t);
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &self.store);
        let pass = self.forward_frame(&b, &inputs, frame, t, 1)?;
        let probs = pass.probs.value();
        let boxes = pass.boxes.value();
        let emb = pass.embeddings.value();

        let mut attention = Vec::new();
        if opts.dump_attention {
            for (input, layers) in inputs.iter().zip(&pass.temporal_weights) {
                attention.push(TemporalAttention {
                    identity: input.identity,
                    frames: input.history.iter().map(|(f, _)| *f).collect(),
                    weights: layers
                        .iter()
                        .map(|heads| heads.iter().map(|w| w.with_value(|v| v.row_slice(0).to_vec())).collect())
                        .collect(),
                });
            }
        }

        let mut slots: Vec<SlotResult> = (0..pass.kinds.len())
            .map(|i| SlotResult {
                kind: pass.kinds[i],
                identity: None,
                object_prob: probs.get(i, OBJECT_CLASS),
                bbox: BBox::from_slice(boxes.row_slice(i)),
                embedding: emb.row_slice(i).to_vec(),
            })
            .collect();

        let mut terminated = Vec::new();
        for slot in slots.iter_mut() {
            if let SlotKind::Tracked(id) = slot.kind {
                if tracks.append(id, t, slot.embedding.clone(), slot.object_prob)? {
                    slot.identity = Some(id);
                } else if tracks.record_miss(id, t, self.config.patience)? {
                    terminated.push(id);
                }
            }
        }
        for id in stale {
            if tracks.record_miss(id, t, self.config.patience)? {
                terminated.push(id);
            }
        }

        let candidates: Vec<usize> = (0..slots.len())
            .filter(|&i| slots[i].kind == SlotKind::Initiation && slots[i].object_prob > RETENTION_THRESHOLD)
            .collect();
        let licensed: Vec<usize> = match opts.public_detections {
            Some((dets, mode, threshold)) => {
                let boxes: Vec<BBox> = candidates.iter().map(|&i| slots[i].bbox).collect();
                filter_initiations(&boxes, dets, mode, threshold)
                    .into_iter()
                    .map(|k| candidates[k])
                    .collect()
            }
            None => candidates,
        };
        let mut spawned = Vec::new();
        for i in licensed {
            if let Some(id) = tracks.spawn(t, slots[i].embedding.clone(), slots[i].object_prob) {
                slots[i].identity = Some(id);
                spawned.push(id);
            }
        }
        Ok(FrameResult {
            frame: t,
            slots,
            spawned,
            terminated,
            attention,
        })
    }

    /// Tracks a whole sequence from an empty track set.
    pub fn track_sequence<'f>(
        &self,
        frames: impl IntoIterator<Item = &'f [f32]>,
        history_cap: usize,
        detections: Option<(&[Vec<Detection>], FilterMode, f64)>,
        dump_attention: bool,
    ) -> Result<Vec<FrameResult>> {
        if history_cap == 0 || history_cap > self.config.temporal_window {
            return Err(Error::Config(format!(
                "history cap must lie in 1..={}, got {history_cap}",
                self.config.temporal_window
            )));
        }
        let mut tracks = TrackSet::new(history_cap);
        let mut results = Vec::new();
        for (t, frame) in frames.into_iter().enumerate() {
            let opts = StepOptions {
                public_detections: detections.map(|(d, m, th)| (d.get(t).map(|v| v.as_slice()).unwrap_or(&[]), m, th)),
                dump_attention,
            };
            results.push(self.step(&mut tracks, frame, t as u32, &opts)?);
        }
        Ok(results)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            ffn_hidden: 8,
            temporal_layers: 1,
            encoder_layers: 1,
            decoder_layers: 1,
            num_queries: 3,
            grid_h: 3,
            grid_w: 4,
            channels: 2,
            temporal_window: 5,
            ..ModelConfig::desk()
        }
    }

    fn unit(cx: f64, cy: f64, s: f64) -> Detection {
        Detection {
            x1: cx - s / 2.0,
            y1: cy - s / 2.0,
            x2: cx + s / 2.0,
            y2: cy + s / 2.0,
            confidence: 1.0,
        }
    }

    #[test]
    fn filter_with_no_detections_blocks_everything() {
        let c = [BBox::new(0.5, 0.5, 0.2, 0.2)];
        assert!(filter_initiations(&c, &[], FilterMode::CenterDistance, 1.0).is_empty());
        assert!(filter_initiations(&c, &[], FilterMode::Iou, 0.5).is_empty());
    }

    #[test]
    fn coincident_candidate_survives_both_modes() {
        let d = unit(0.4, 0.6, 0.2);
        let c = [d.bbox()];
        assert_eq!(filter_initiations(&c, &[d], FilterMode::CenterDistance, 1.0), [0]);
        assert_eq!(filter_initiations(&c, &[d], FilterMode::Iou, 0.5), [0]);
    }

    #[test]
    fn one_detection_licenses_one_candidate() {
        let d = unit(0.5, 0.5, 0.2);
        let c = [BBox::new(0.53, 0.5, 0.2, 0.2), BBox::new(0.51, 0.5, 0.2, 0.2)];
        assert_eq!(filter_initiations(&c, &[d], FilterMode::CenterDistance, 1.0), [1]);
        assert_eq!(filter_initiations(&c, &[d], FilterMode::Iou, 0.5), [1]);
    }

    #[test]
    fn top_k_ties_keep_scan_order() {
        assert_eq!(top_k(&[1.0; 6], 3), [0, 1, 2]);
        assert_eq!(top_k(&[0.1, 0.9, 0.5], 5), [1, 2, 0]);
        assert_eq!(top_k(&[0.3, 0.2], 2).len(), 2);
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut c = tiny();
        c.heads = 3;
        assert!(matches!(Mo3tr::new(c), Err(Error::Config(_))));
    }

    #[test]
    fn frame_zero_only_initiates() {
        let model = Mo3tr::new(tiny()).unwrap();
        let mut tracks = TrackSet::new(5);
        let frame = vec![0.5f32; 3 * 4 * 2];
        let r = model.step(&mut tracks, &frame, 0, &StepOptions::default()).unwrap();
        assert_eq!(r.slots.len(), 3);
        assert!(r.slots.iter().all(|s| s.kind == SlotKind::Initiation));
        assert_eq!(r.spawned.len(), tracks.len());
    }

    #[test]
    fn wrong_frame_size_is_a_config_error() {
        let model = Mo3tr::new(tiny()).unwrap();
        let mut tracks = TrackSet::new(5);
        let r = model.step(&mut tracks, &[0.0; 5], 0, &StepOptions::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
