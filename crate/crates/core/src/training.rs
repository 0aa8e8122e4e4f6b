//! Two-stage training: detection-only passes first, then full tracking steps
//! over tracklets built from initiation passes on the preceding frames.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{hungarian, matching_cost, BBox, CostMatrix, CostWeights};
use crate::error::{Error, Result};
use crate::model::{track_inputs, FramePass, Mo3tr, QueryMode, SlotKind};
use crate::params::{Binding, ParamStore};
use crate::synthworld::{GtObject, SyntheticSequence};
use crate::tensor::{Tape, Tensor, Var};
use crate::trackstore::{Embedding, TrackSet, RETENTION_THRESHOLD};
use crate::transformer::{BACKGROUND_CLASS, OBJECT_CLASS};

/// When the initiation passes feeding the tracklets are recomputed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TrackletRefresh {
    /// Once per epoch, with the weights at the start of the epoch.
    Epoch,
    /// Before every training step.
    Step,
}

impl TrackletRefresh {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "epoch" => Ok(Self::Epoch),
            "step" => Ok(Self::Step),
            _ => Err(Error::Config(format!("unknown tracklet refresh {s:?} (epoch | step)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Epoch => "epoch",
            Self::Step => "step",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `lr_decay_factor` every this many
    /// epochs of a stage.
    pub lr_decay_epochs: usize,
    pub lr_decay_factor: f64,
    pub history_len_min: usize,
    pub history_len_max: usize,
    pub future_horizon: usize,
    pub rollout_weight: f64,
    /// Class weight of background targets on initiation slots.
    pub background_weight: f64,
    /// Class weight of background targets on tracked slots (ended or
    /// spurious tracks).
    pub termination_weight: f64,
    pub cost: CostWeights,
    /// Probability of dropping each history entry.
    pub fn_drop: f64,
    /// Probability per track and window of a false history entry.
    pub fp_insert: f64,
    /// Probability per window of an extra track made only of false entries.
    pub fp_track: f64,
    /// Draw the history length uniformly instead of always using the maximum.
    pub random_len: bool,
    /// Probability per window of taking the history from a closed-loop
    /// tracking pass instead of initiation-only passes.
    pub closed_loop: f64,
    /// Global gradient-norm clip; `0` disables.
    pub grad_clip: f64,
    /// Weight of the per-cell object loss (top-k queries only).
    pub cell_loss_weight: f64,
    pub tracklet_refresh: TrackletRefresh,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn paper() -> Self {
        Self {
            stage1_epochs: 300,
            stage2_epochs: 300,
            learning_rate: 1e-4,
            lr_decay_epochs: 100,
            lr_decay_factor: 0.1,
            history_len_min: 1,
            history_len_max: 30,
            future_horizon: 10,
            rollout_weight: 1.0,
            background_weight: 0.1,
            termination_weight: 1.0,
            cost: CostWeights::default(),
            fn_drop: 0.15,
            fp_insert: 0.1,
            fp_track: 0.1,
            random_len: true,
            closed_loop: 0.0,
            grad_clip: 0.1,
            cell_loss_weight: 1.0,
            tracklet_refresh: TrackletRefresh::Epoch,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            stage1_epochs: 30,
            stage2_epochs: 100,
            learning_rate: 1e-3,
            lr_decay_epochs: 50,
            fp_track: 0.5,
            closed_loop: 0.5,
            ..Self::paper()
        }
    }

    pub fn validate(&self, alignment_width: usize) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if self.history_len_min == 0 || self.history_len_min > self.history_len_max || self.history_len_max > alignment_width {
            return bad(format!(
                "train.history_len range {}..={} must lie within 1..={alignment_width}",
                self.history_len_min, self.history_len_max
            ));
        }
        if self.future_horizon == 0 {
            return bad("train.future_horizon must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) || self.lr_decay_epochs == 0 || !(self.lr_decay_factor > 0.0) {
            return bad("train.learning_rate, lr_decay_epochs and lr_decay_factor must be positive".into());
        }
        for (name, p) in [("fn_drop", self.fn_drop), ("fp_insert", self.fp_insert), ("fp_track", self.fp_track), ("closed_loop", self.closed_loop)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("train.{name} must be a probability, got {p}"));
            }
        }
        if !(self.background_weight > 0.0) || !(self.termination_weight > 0.0) || self.rollout_weight < 0.0 || self.grad_clip < 0.0 {
            return bad("train.background_weight and termination_weight must be positive, rollout_weight and grad_clip nonnegative".into());
        }
        self.cost.validate()?;
        Ok(())
    }

    /// Learning rate at `epoch` (0-based) of a stage.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.lr_decay_epochs) as i32;
        self.learning_rate * libm::pow(self.lr_decay_factor, drops as f64)
    }
}

/// Adaptive-moment gradient descent, β = (0.9, 0.999), no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.steps as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.steps as f64);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let p = store.get_mut(id).data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (*m / c1) / (libm::sqrt(*v / c2) + self.eps);
            }
        }
    }
}

/// Rescales `grads` so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(
        grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>(),
    );
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Loss of one frame, split into its parts. `total = ce + l1 + giou`, where
/// the box parts already carry their weights.
pub struct FrameLoss<'t> {
    pub total: Var<'t>,
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
    /// `(slot, gt index)` supervised with a box.
    pub pairs: Vec<(usize, usize)>,
    /// Slots whose pair was decided by identity alone.
    pub identity_pairs: usize,
    /// Slots taking part in the Hungarian matching.
    pub hungarian_slots: Vec<usize>,
}

/// Differentiable GIoU of matching rows of `pred` and `target` (`n × 4`,
/// `cx, cy, w, h`). Returns `n × 1`.
pub fn giou_var<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let corners = |b: Var<'t>| -> Result<[Var<'t>; 4]> {
        let cx = b.slice_cols(0, 1)?;
        let cy = b.slice_cols(1, 1)?;
        let hw = b.slice_cols(2, 1)?.mul_scalar(0.5)?;
        let hh = b.slice_cols(3, 1)?.mul_scalar(0.5)?;
        Ok([cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?])
    };
    let [px1, py1, px2, py2] = corners(pred)?;
    let [tx1, ty1, tx2, ty2] = corners(target)?;
    let area = |x1: Var<'t>, y1: Var<'t>, x2: Var<'t>, y2: Var<'t>| x2.sub(x1)?.mul(y2.sub(y1)?);
    let ap = area(px1, py1, px2, py2)?;
    let at = area(tx1, ty1, tx2, ty2)?;
    let iw = px2.minimum(tx2)?.sub(px1.maximum(tx1)?)?.clamp_min(0.0)?;
    let ih = py2.minimum(ty2)?.sub(py1.maximum(ty1)?)?.clamp_min(0.0)?;
    let inter = iw.mul(ih)?;
    let union = ap.add(at)?.sub(inter)?;
    let iou = inter.div(union)?;
    let cw = px2.maximum(tx2)?.sub(px1.minimum(tx1)?)?;
    let ch = py2.maximum(ty2)?.sub(py1.minimum(ty1)?)?;
    let enclose = cw.mul(ch)?;
    iou.sub(enclose.sub(union)?.div(enclose)?)
}

/// Mean over rows of `alpha_l1 · ‖p − t‖₁` and `alpha_giou · (1 − giou)`.
pub fn box_loss<'t>(pred: Var<'t>, target: &[BBox], w: CostWeights) -> Result<(Var<'t>, Var<'t>)> {
    let n = target.len();
    let data = target.iter().flat_map(|b| b.to_array()).collect();
    let t = pred.tape().constant(Tensor::new(n, 4, data)?);
    let l1 = pred.sub(t)?.abs()?.sum()?.mul_scalar(w.alpha_l1 / n as f64)?;
    let g = giou_var(pred, t)?;
    let giou = g.mul_scalar(-1.0)?.add_scalar(1.0)?.sum()?.mul_scalar(w.alpha_giou / n as f64)?;
    Ok((l1, giou))
}

/// Weighted cross-entropy `Σ wᵢ·(−log pᵢ[cᵢ]) / Σ wᵢ` over the rows of
/// `logits`, with weight 1 for objects and `background_weight` otherwise.
pub fn class_loss<'t>(logits: Var<'t>, classes: &[usize], background_weight: f64) -> Result<Var<'t>> {
    let weights: Vec<f64> = classes
        .iter()
        .map(|&c| if c == BACKGROUND_CLASS { background_weight } else { 1.0 })
        .collect();
    weighted_class_loss(logits, classes, &weights)
}

/// `Σ wᵢ·(−log pᵢ[cᵢ]) / Σ wᵢ` with explicit per-row weights.
pub fn weighted_class_loss<'t>(logits: Var<'t>, classes: &[usize], weights: &[f64]) -> Result<Var<'t>> {
    let n = logits.rows();
    let k = logits.cols();
    if classes.len() != n || weights.len() != n {
        return Err(Error::Dimension {
            op: "class_loss",
            lhs: logits.shape().to_vec(),
            rhs: alloc::vec![classes.len(), weights.len()],
        });
    }
    let total: f64 = weights.iter().sum();
    let mut pick = vec![0.0; n * k];
    for (i, (&c, &w)) in classes.iter().zip(weights).enumerate() {
        pick[i * k + c] = -w / total;
    }
    let pick = logits.tape().constant(Tensor::new(n, k, pick)?);
    logits.log_softmax_rows()?.mul(pick)?.sum()
}

/// The scalar value of `−p̂ + bbox_cost` for every (visible gt, slot) pair;
/// used for assignment only.
fn initiation_costs(gt: &[&GtObject], slots: &[usize], probs: &Tensor, boxes: &Tensor, w: CostWeights) -> Result<CostMatrix> {
    CostMatrix::from_fn(gt.len(), slots.len(), |r, c| {
        let s = slots[c];
        matching_cost(OBJECT_CLASS, gt[r].bbox, probs.row_slice(s), BBox::from_slice(boxes.row_slice(s)), w)
    })
}

fn check_unique(gt: &[GtObject]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for g in gt {
        if !seen.insert(g.identity) {
            return Err(Error::Data(format!("identity {} appears twice in one frame", g.identity)));
        }
    }
    Ok(())
}

/// Supervision of one frame pass.
///
/// Tracked slots are paired with the ground truth of their own identity
/// (visible or occluded); identities no longer present supervise background
/// with weight `termination_weight`. Only initiation slots are matched, by
/// Hungarian assignment, to the visible ground truth left over.
pub fn match_and_loss<'t>(pass: &FramePass<'t>, gt: &[GtObject], cfg: &TrainingConfig) -> Result<FrameLoss<'t>> {
    check_unique(gt)?;
    let n = pass.kinds.len();
    let mut classes = vec![BACKGROUND_CLASS; n];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut claimed = BTreeSet::new();
    for (slot, kind) in pass.kinds.iter().enumerate() {
        if let SlotKind::Tracked(id) = kind {
            if let Some(g) = gt.iter().position(|g| g.identity == *id) {
                classes[slot] = OBJECT_CLASS;
                pairs.push((slot, g));
                claimed.insert(*id);
            }
        }
    }
    let identity_pairs = pairs.len();

    let init_slots: Vec<usize> = (0..n).filter(|&s| pass.kinds[s] == SlotKind::Initiation).collect();
    let open: Vec<usize> = (0..gt.len())
        .filter(|&g| gt[g].visible && !claimed.contains(&gt[g].identity))
        .collect();
    if !open.is_empty() && !init_slots.is_empty() {
        let probs = pass.probs.value();
        let boxes = pass.boxes.value();
        let refs: Vec<&GtObject> = open.iter().map(|&g| &gt[g]).collect();
        let costs = initiation_costs(&refs, &init_slots, &probs, &boxes, cfg.cost)?;
        for (r, c) in hungarian(&costs).pairs {
            let slot = init_slots[c];
            debug_assert_eq!(pass.kinds[slot], SlotKind::Initiation);
            classes[slot] = OBJECT_CLASS;
            pairs.push((slot, open[r]));
        }
    }

    let weights: Vec<f64> = classes
        .iter()
        .zip(&pass.kinds)
        .map(|(&c, kind)| match (c == BACKGROUND_CLASS, kind) {
            (false, _) => 1.0,
            (true, SlotKind::Tracked(_)) => cfg.termination_weight,
            (true, SlotKind::Initiation) => cfg.background_weight,
        })
        .collect();
    let ce = weighted_class_loss(pass.logits, &classes, &weights)?;
    let mut total = ce;
    let (mut l1v, mut gv) = (0.0, 0.0);
    if !pairs.is_empty() {
        let slots: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let targets: Vec<BBox> = pairs.iter().map(|p| gt[p.1].bbox).collect();
        let (l1, g) = box_loss(pass.boxes.gather_rows(&slots)?, &targets, cfg.cost)?;
        l1v = l1.value().item();
        gv = g.value().item();
        total = total.add(l1)?.add(g)?;
    }
    Ok(FrameLoss {
        total,
        ce: ce.value().item(),
        l1: l1v,
        giou: gv,
        pairs,
        identity_pairs,
        hungarian_slots: init_slots,
    })
}

/// Box supervision of the temporal predictions for `t, t + 1, …`: every
/// tracked slot's predicted box at `t + h` is compared with its identity's
/// ground truth at `t + h`; absent frames contribute nothing. Mean over the
/// contributing pairs, `None` when there are none.
pub fn future_rollout_loss<'t>(
    pass: &FramePass<'t>,
    future_gt: &[Vec<GtObject>],
    cost: CostWeights,
) -> Result<Option<(Var<'t>, Var<'t>)>> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let tracked = pass.kinds.iter().filter_map(|k| match k {
        SlotKind::Tracked(id) => Some(*id),
        SlotKind::Initiation => None,
    });
    for (k, id) in tracked.enumerate() {
        let horizon = pass.rollout[k].rows();
        for (h, gt) in future_gt.iter().take(horizon).enumerate() {
            if let Some(g) = gt.iter().find(|g| g.identity == id) {
                rows.push((k, h));
                targets.push(g.bbox);
            }
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let all = Var::concat_rows(&pass.rollout)?;
    let mut offsets = vec![0];
    for r in &pass.rollout {
        offsets.push(offsets.last().unwrap() + r.rows());
    }
    let index: Vec<usize> = rows.iter().map(|&(k, h)| offsets[k] + h).collect();
    box_loss(all.gather_rows(&index)?, &targets, cost).map(Some)
}

/// Per-cell object loss for the top-k cell classifier: a cell is an object
/// cell when its center lies inside a visible ground-truth box.
pub fn cell_loss<'t>(pass: &FramePass<'t>, gt: &[GtObject], grid_h: usize, grid_w: usize, background_weight: f64) -> Result<Var<'t>> {
    let mut classes = vec![BACKGROUND_CLASS; grid_h * grid_w];
    for g in gt.iter().filter(|g| g.visible) {
        let [x1, y1, x2, y2] = g.bbox.corners();
        for r in 0..grid_h {
            let py = (r as f64 + 0.5) / grid_h as f64;
            for c in 0..grid_w {
                let px = (c as f64 + 0.5) / grid_w as f64;
                if px >= x1 && px <= x2 && py >= y1 && py <= y2 {
                    classes[r * grid_w + c] = OBJECT_CLASS;
                }
            }
        }
    }
    class_loss(pass.cell_logits, &classes, background_weight)
}

/// What an initiation-only pass over one frame leaves for tracklet building.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InitiationRecord {
    /// Matched, retained slots: `(gt identity, embedding)`.
    pub matched: Vec<(u64, Embedding)>,
    /// Unmatched slots, most object-like first; the source of inserted false
    /// positives.
    pub spare: Vec<Embedding>,
}

/// Runs `frame` without any track history and matches the initiation slots to
/// the visible ground truth.
pub fn initiation_record(model: &Mo3tr, frame: &[f32], gt: &[GtObject], cost: CostWeights) -> Result<InitiationRecord> {
    check_unique(gt)?;
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &model.store);
    let pass = model.forward_frame(&b, &[], frame, 0, 1)?;
    let probs = pass.probs.value();
    let boxes = pass.boxes.value();
    let emb = pass.embeddings.value();
    let slots: Vec<usize> = (0..pass.kinds.len()).collect();
    let visible: Vec<&GtObject> = gt.iter().filter(|g| g.visible).collect();
    let costs = initiation_costs(&visible, &slots, &probs, &boxes, cost)?;
    let mut used = vec![false; slots.len()];
    let mut matched = Vec::new();
    for (r, c) in hungarian(&costs).pairs {
        used[c] = true;
        if probs.get(c, OBJECT_CLASS) > RETENTION_THRESHOLD {
            matched.push((visible[r].identity, emb.row_slice(c).to_vec()));
        }
    }
    let mut spare: Vec<usize> = (0..slots.len()).filter(|&s| !used[s]).collect();
    spare.sort_by(|&a, &b| probs.get(b, OBJECT_CLASS).total_cmp(&probs.get(a, OBJECT_CLASS)).then(a.cmp(&b)));
    Ok(InitiationRecord {
        matched,
        spare: spare.into_iter().map(|s| emb.row_slice(s).to_vec()).collect(),
    })
}

pub fn initiation_records(model: &Mo3tr, seq: &SyntheticSequence, cost: CostWeights) -> Result<Vec<InitiationRecord>> {
    seq.frames
        .iter()
        .zip(&seq.ground_truth)
        .map(|(f, gt)| initiation_record(model, &f.data, gt, cost))
        .collect()
}

/// Entries appended on each frame of a closed-loop pass, `(identity, embedding)`.
pub type LoopRecord = Vec<(u64, Embedding)>;

/// Runs the tracker over `seq` as at inference, except that spawned tracks
/// take the identity of the visible ground truth their slot is matched to.
/// Unmatched spawns get identities from [`SPURIOUS_IDENTITY_BASE`] up, so
/// duplicates and lingering tracks are reproduced with the labels that make
/// them background.
pub fn tracking_records(model: &Mo3tr, seq: &SyntheticSequence, cost: CostWeights) -> Result<Vec<LoopRecord>> {
    let w = model.config.temporal_window;
    let patience = model.config.patience;
    struct Open {
        history: Vec<(u32, Embedding)>,
        misses: u32,
    }
    let mut open: alloc::collections::BTreeMap<u64, Open> = alloc::collections::BTreeMap::new();
    let mut next_spurious = SPURIOUS_IDENTITY_BASE;
    let mut out = Vec::with_capacity(seq.len());
    for (f, (frame, gt)) in seq.frames.iter().zip(&seq.ground_truth).enumerate() {
        let t = f as u32;
        let inputs: Vec<crate::model::TrackInput> = open
            .iter()
            .filter_map(|(&id, o)| {
                let history: Vec<(u32, Embedding)> = o
                    .history
                    .iter()
                    .filter(|(hf, _)| (t - hf) as usize <= w)
                    .cloned()
                    .collect();
                (!history.is_empty()).then_some(crate::model::TrackInput { identity: id, history })
            })
            .collect();
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &model.store);
        let pass = model.forward_frame(&b, &inputs, &frame.data, t, 1)?;
        let probs = pass.probs.value();
        let boxes = pass.boxes.value();
        let emb = pass.embeddings.value();
        let mut appended: LoopRecord = Vec::new();
        let mut seen = BTreeSet::new();
        for (slot, kind) in pass.kinds.iter().enumerate() {
            if let SlotKind::Tracked(id) = kind {
                seen.insert(*id);
                let o = open.get_mut(id).expect("input track is open");
                if probs.get(slot, OBJECT_CLASS) > RETENTION_THRESHOLD {
                    o.history.push((t, emb.row_slice(slot).to_vec()));
                    o.misses = 0;
                    appended.push((*id, emb.row_slice(slot).to_vec()));
                } else {
                    o.misses += 1;
                }
            }
        }
        for (id, o) in open.iter_mut() {
            if !seen.contains(id) {
                o.misses += 1;
            }
        }
        open.retain(|_, o| o.misses < patience);

        let init: Vec<usize> = (0..pass.kinds.len())
            .filter(|&s| pass.kinds[s] == SlotKind::Initiation && probs.get(s, OBJECT_CLASS) > RETENTION_THRESHOLD)
            .collect();
        let free: Vec<&GtObject> = gt
            .iter()
            .filter(|g| g.visible && !appended.iter().any(|(id, _)| *id == g.identity))
            .collect();
        let costs = initiation_costs(&free, &init, &probs, &boxes, cost)?;
        let mut label: Vec<Option<u64>> = vec![None; init.len()];
        for (r, c) in hungarian(&costs).pairs {
            label[c] = Some(free[r].identity);
        }
        for (c, &slot) in init.iter().enumerate() {
            let id = match label[c] {
                Some(id) if !open.contains_key(&id) => id,
                _ => {
                    next_spurious += 1;
                    next_spurious
                }
            };
            let e = emb.row_slice(slot).to_vec();
            open.insert(
                id,
                Open {
                    history: vec![(t, e.clone())],
                    misses: 0,
                },
            );
            appended.push((id, e));
        }
        out.push(appended);
    }
    Ok(out)
}

/// Track set at `t − 1` from the records of frames `t − K .. t − 1`, keyed
/// by ground-truth identity. `K` is clipped to `t`.
pub fn tracklets_from_records(records: &[InitiationRecord], t: usize, k: usize, width: usize) -> TrackSet {
    let mut set = TrackSet::new(width);
    let k = k.min(t);
    for f in t - k..t {
        for (id, e) in &records[f].matched {
            set.insert_entry(*id, f as u32, e.clone());
        }
    }
    set
}

/// Like [`tracklets_from_records`] but from closed-loop records.
pub fn tracklets_from_loop(records: &[LoopRecord], t: usize, k: usize, width: usize) -> TrackSet {
    let mut set = TrackSet::new(width);
    let k = k.min(t);
    for f in t - k..t {
        for (id, e) in &records[f] {
            set.insert_entry(*id, f as u32, e.clone());
        }
    }
    set
}

/// Builds the tracklets of frame `t` by running the `K` preceding frames
/// through `model` without history.
pub fn build_tracklets(model: &Mo3tr, seq: &SyntheticSequence, t: usize, k: usize, cost: CostWeights) -> Result<TrackSet> {
    if t == 0 || k == 0 || t > seq.len() {
        return Err(Error::Usage(format!("build_tracklets needs 1 <= t <= {} and K >= 1", seq.len())));
    }
    let k = k.min(t);
    let mut records = vec![InitiationRecord::default(); t];
    for f in t - k..t {
        records[f] = initiation_record(model, &seq.frames[f].data, &seq.ground_truth[f], cost)?;
    }
    Ok(tracklets_from_records(&records, t, k, model.config.temporal_window))
}

/// Identities given to inserted spurious tracks; never present in ground
/// truth of the synthetic sequences.
pub const SPURIOUS_IDENTITY_BASE: u64 = 1 << 62;

/// History length for frame `t`: uniform in the configured range when
/// `random_len` is on, else the maximum; clipped to `t`.
pub fn sample_history_len<R: Rng>(cfg: &TrainingConfig, t: usize, rng: &mut R) -> usize {
    let k = if cfg.random_len {
        rng.random_range(cfg.history_len_min..=cfg.history_len_max)
    } else {
        cfg.history_len_max
    };
    k.min(t)
}

/// Drops history entries with probability `fn_drop`, then inserts false
/// entries into tracks, taken from the `spare` embeddings of the window
/// `t − k .. t − 1`, and with probability `fp_track` one spurious track: either
/// spare embeddings or a late copy of the recent part of a real track.
pub fn augment<R: Rng>(set: &mut TrackSet, records: &[InitiationRecord], t: usize, k: usize, cfg: &TrainingConfig, rng: &mut R) {
    if cfg.fn_drop > 0.0 {
        set.retain_entries(|_, _| !rng.random_bool(cfg.fn_drop));
    }
    if k == 0 {
        return;
    }
    let window = t - k..t;
    let ids: Vec<u64> = set.tracks().map(|tr| tr.identity).collect();
    for id in ids {
        if cfg.fp_insert <= 0.0 || !rng.random_bool(cfg.fp_insert) {
            continue;
        }
        let used: BTreeSet<u32> = set.get(id).map(|tr| tr.history.iter().map(|(f, _)| *f).collect()).unwrap_or_default();
        let free: Vec<usize> = window
            .clone()
            .filter(|&f| !used.contains(&(f as u32)) && !records[f].spare.is_empty())
            .collect();
        if let Some(&f) = free.get(rng.random_range(0..free.len().max(1))) {
            set.insert_entry(id, f as u32, records[f].spare[0].clone());
        }
    }
    if cfg.fp_track > 0.0 && rng.random_bool(cfg.fp_track) {
        let id = SPURIOUS_IDENTITY_BASE / 2 + t as u64;
        let sources: Vec<u64> = set
            .tracks()
            .filter(|tr| tr.identity < SPURIOUS_IDENTITY_BASE / 2 && tr.history.len() >= 2)
            .map(|tr| tr.identity)
            .collect();
        if !sources.is_empty() && rng.random_bool(0.5) {
            // a late duplicate: the recent part of a real track
            let src = sources[rng.random_range(0..sources.len())];
            let hist: Vec<(u32, Embedding)> = set.get(src).map(|tr| tr.history.iter().cloned().collect()).unwrap_or_default();
            let span = rng.random_range(1..hist.len());
            for (f, e) in &hist[hist.len() - span..] {
                set.insert_entry(id, *f, e.clone());
            }
        } else {
            let span = rng.random_range(1..=k);
            let start = rng.random_range(t - k..=t - span);
            for f in start..start + span {
                if let Some(e) = records[f].spare.first() {
                    set.insert_entry(id, f as u32, e.clone());
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub stage: u8,
    pub total: f64,
    pub ce: f64,
    pub l1: f64,
    pub giou: f64,
}

#[derive(Default)]
struct Accum {
    total: f64,
    ce: f64,
    l1: f64,
    giou: f64,
    n: usize,
}

impl Accum {
    fn add(&mut self, [total, ce, l1, giou]: [f64; 4]) {
        self.total += total;
        self.ce += ce;
        self.l1 += l1;
        self.giou += giou;
        self.n += 1;
    }

    fn record(&self, epoch: usize, stage: u8) -> LossRecord {
        let n = self.n.max(1) as f64;
        LossRecord {
            epoch,
            stage,
            total: self.total / n,
            ce: self.ce / n,
            l1: self.l1 / n,
            giou: self.giou / n,
        }
    }
}

/// The training objective of frame `t` given the track history `tracks`,
/// and its value split as `(total, ce, l1, giou)`.
fn frame_objective<'t>(
    model: &Mo3tr,
    b: &Binding<'t, '_>,
    tracks: &TrackSet,
    seq: &SyntheticSequence,
    t: usize,
    stage: u8,
    cfg: &TrainingConfig,
) -> Result<(Var<'t>, [f64; 4])> {
    let (inputs, _) = track_inputs(tracks, t as u32);
    let horizon = if stage == 1 { 1 } else { cfg.future_horizon };
    let pass = model.forward_frame(b, &inputs, &seq.frames[t].data, t as u32, horizon)?;
    let fl = match_and_loss(&pass, &seq.ground_truth[t], cfg)?;
    let mut total = fl.total;
    let (mut l1, mut giou) = (fl.l1, fl.giou);
    if stage == 2 && cfg.rollout_weight > 0.0 {
        let future = &seq.ground_truth[t..(t + horizon).min(seq.len())];
        if let Some((rl1, rg)) = future_rollout_loss(&pass, future, cfg.cost)? {
            let (rl1, rg) = (rl1.mul_scalar(cfg.rollout_weight)?, rg.mul_scalar(cfg.rollout_weight)?);
            l1 += rl1.value().item();
            giou += rg.value().item();
            total = total.add(rl1)?.add(rg)?;
        }
    }
    let mut ce = fl.ce;
    if model.config.query_mode == QueryMode::TopK && cfg.cell_loss_weight > 0.0 {
        let cl = cell_loss(&pass, &seq.ground_truth[t], model.config.grid_h, model.config.grid_w, cfg.background_weight)?
            .mul_scalar(cfg.cell_loss_weight)?;
        ce += cl.value().item();
        total = total.add(cl)?;
    }
    let value = total.value().item();
    Ok((total, [value, ce, l1, giou]))
}

/// Mean stage-2 objective over every frame of `data` at the current
/// weights, with the longest allowed ground-truth history and no
/// augmentation. Comparable across checkpoints, unlike epoch means.
pub fn evaluate_loss(model: &Mo3tr, data: &[SyntheticSequence], cfg: &TrainingConfig) -> Result<LossRecord> {
    cfg.validate(model.config.temporal_window)?;
    let mut acc = Accum::default();
    for seq in data {
        let records = initiation_records(model, seq, cfg.cost)?;
        for t in 0..seq.len() {
            let k = t.min(cfg.history_len_max);
            let tracks = if k == 0 {
                TrackSet::new(model.config.temporal_window)
            } else {
                tracklets_from_records(&records, t, k, model.config.temporal_window)
            };
            let tape = Tape::new();
            let b = Binding::frozen(&tape, &model.store);
            let (_, terms) = frame_objective(model, &b, &tracks, seq, t, 2, cfg)?;
            acc.add(terms);
        }
    }
    Ok(acc.record(0, 2))
}

/// Trains `model` in place. `on_epoch` sees every epoch's mean losses and
/// the weights after it.
pub fn train(
    model: &mut Mo3tr,
    data: &[SyntheticSequence],
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(&LossRecord, &Mo3tr) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate(model.config.temporal_window)?;
    if data.is_empty() || data.iter().all(|s| s.is_empty()) {
        return Err(Error::Data("training needs at least one non-empty sequence".into()));
    }
    let mc = &model.config;
    for s in data {
        if (s.grid_h, s.grid_w, s.channels) != (mc.grid_h, mc.grid_w, mc.channels) {
            return Err(Error::Config(format!(
                "sequence {} is {}x{}x{}, model expects {}x{}x{}",
                s.name, s.grid_h, s.grid_w, s.channels, mc.grid_h, mc.grid_w, mc.channels
            )));
        }
        for gt in &s.ground_truth {
            check_unique(gt)?;
        }
    }
    let mut curve = Vec::new();
    let frames: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(s, seq)| (0..seq.len()).map(move |t| (s, t)))
        .collect();

    // Each stage starts from fresh optimizer moments and the same seed, so
    // stage 2 resumed from a stage-1 checkpoint equals an uninterrupted run.
    for (stage, epochs) in [(1u8, cfg.stage1_epochs), (2u8, cfg.stage2_epochs)] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(&model.store);
        for epoch in 0..epochs {
            let lr = cfg.learning_rate_at(epoch);
            let mut order = frames.clone();
            order.shuffle(&mut rng);
            let mut records: Vec<Vec<InitiationRecord>> = Vec::new();
            let mut loops: Vec<Vec<LoopRecord>> = Vec::new();
            if stage == 2 && cfg.tracklet_refresh == TrackletRefresh::Epoch {
                records = data
                    .iter()
                    .map(|s| initiation_records(model, s, cfg.cost))
                    .collect::<Result<_>>()?;
            }
            if stage == 2 && cfg.closed_loop > 0.0 && cfg.tracklet_refresh == TrackletRefresh::Epoch {
                loops = data
                    .iter()
                    .map(|s| tracking_records(model, s, cfg.cost))
                    .collect::<Result<_>>()?;
            }
            let mut acc = Accum::default();
            for (s, t) in order {
                let seq = &data[s];
                let tracks = if stage == 1 {
                    TrackSet::new(model.config.temporal_window)
                } else {
                    let k = sample_history_len(cfg, t, &mut rng);
                    if cfg.tracklet_refresh == TrackletRefresh::Step {
                        let mut fresh = vec![InitiationRecord::default(); seq.len()];
                        for f in t - k..t {
                            fresh[f] = initiation_record(model, &seq.frames[f].data, &seq.ground_truth[f], cfg.cost)?;
                        }
                        let mut set = tracklets_from_records(&fresh, t, k, model.config.temporal_window);
                        augment(&mut set, &fresh, t, k, cfg, &mut rng);
                        set
                    } else if cfg.closed_loop > 0.0 && rng.random_bool(cfg.closed_loop) {
                        let mut set = tracklets_from_loop(&loops[s], t, k, model.config.temporal_window);
                        augment(&mut set, &records[s], t, k, cfg, &mut rng);
                        set
                    } else {
                        let mut set = tracklets_from_records(&records[s], t, k, model.config.temporal_window);
                        augment(&mut set, &records[s], t, k, cfg, &mut rng);
                        set
                    }
                };
                let grads = {
                    let tape = Tape::new();
                    let b = Binding::trainable(&tape, &model.store);
                    let (total, terms) = frame_objective(model, &b, &tracks, seq, t, stage, cfg)?;
                    acc.add(terms);
                    let grads = total.backward()?;
                    b.collect(&grads)
                };
                let mut grads = grads;
                if cfg.grad_clip > 0.0 {
                    clip_gradients(&mut grads, cfg.grad_clip);
                }
                adam.step(&mut model.store, &grads, lr);
            }
            let rec = acc.record(epoch, stage);
            on_epoch(&rec, model)?;
            curve.push(rec);
        }
    }
    Ok(curve)
}
