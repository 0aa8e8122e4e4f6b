//! Box geometry, the set-prediction matching cost and an exact
//! minimum-cost bipartite assignment solver.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Normalized center-format box `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From left, top, width, height.
    pub fn from_ltwh(left: f64, top: f64, w: f64, h: f64) -> Self {
        Self::new(left + w / 2.0, top + h / 2.0, w, h)
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }

    pub fn validate(self) -> Result<Self> {
        if !(self.w > 0.0 && self.h > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Geometry(format!(
                "box needs positive finite extents, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(self)
    }

    fn intersection(self, other: BBox) -> f64 {
        let [ax0, ay0, ax1, ay1] = self.corners();
        let [bx0, by0, bx1, by1] = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        iw * ih
    }

    /// Plain intersection over union; 0 for degenerate input.
    pub fn iou(self, other: BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Generalized IoU: `IoU − (enclosing − union) / enclosing`, in `(−1, 1]`.
pub fn giou(a: BBox, b: BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let enclosing = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Relative weights of the L1 and GIoU box terms.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostWeights {
    pub alpha_l1: f64,
    pub alpha_giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            alpha_l1: 5.0,
            alpha_giou: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(self) -> Result<Self> {
        if self.alpha_l1 < 0.0 || self.alpha_giou < 0.0 {
            return Err(Error::Config("cost weights must be nonnegative".into()));
        }
        Ok(self)
    }
}

pub fn l1_distance(a: BBox, b: BBox) -> f64 {
    a.to_array()
        .iter()
        .zip(b.to_array())
        .map(|(x, y)| (x - y).abs())
        .sum()
}

/// Weighted sum of an L1 distance and a GIoU cost (`1 − giou`).
pub fn combine_bbox_cost(l1: f64, giou_cost: f64, w: CostWeights) -> f64 {
    w.alpha_l1 * l1 + w.alpha_giou * giou_cost
}

/// `−p̂ + bbox_cost`.
pub fn combine_matching_cost(class_prob: f64, bbox_cost: f64) -> f64 {
    -class_prob + bbox_cost
}

/// `alpha_l1 · ‖gt − pred‖₁ + alpha_giou · (1 − giou)`.
pub fn bbox_cost(gt: BBox, pred: BBox, w: CostWeights) -> Result<f64> {
    let g = giou(gt, pred)?;
    Ok(combine_bbox_cost(l1_distance(gt, pred), 1.0 - g, w))
}

/// `−p̂(gt_class) + bbox_cost`. Used only to pick an assignment, never as a
/// training loss.
pub fn matching_cost(gt_class: usize, gt_box: BBox, pred_probs: &[f64], pred_box: BBox, w: CostWeights) -> Result<f64> {
    Ok(combine_matching_cost(pred_probs[gt_class], bbox_cost(gt_box, pred_box, w)?))
}

/// Row-major `rows × cols` cost matrix: rows are ground truth, columns are
/// predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension {
                op: "cost_matrix",
                lhs: vec![rows, cols],
                rhs: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage("cost matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c)?);
            }
        }
        Self::new(rows, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Ground truth for one object in matching: class index and box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub class: usize,
    pub bbox: BBox,
}

/// A prediction in matching: class probabilities and box.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub bbox: BBox,
}

pub fn matching_cost_matrix(targets: &[Target], preds: &[Prediction], w: CostWeights) -> Result<CostMatrix> {
    CostMatrix::from_fn(targets.len(), preds.len(), |r, c| {
        matching_cost(targets[r].class, targets[r].bbox, &preds[c].probs, preds[c].bbox, w)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(gt_index, pred_index)`, sorted by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Exact minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Shortest-augmenting-path Hungarian method with row/column potentials,
/// O(n²·m). A wide matrix is solved directly, a tall one through its
/// transpose; either way the surplus side is left unmatched, which is the
/// same as padding to square with a constant sentinel. Ties resolve to the
/// lowest column index in scan order.
pub fn hungarian(c: &CostMatrix) -> Assignment {
    if c.rows == 0 || c.cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    let transposed = c.rows > c.cols;
    let (n, m) = if transposed { (c.cols, c.rows) } else { (c.rows, c.cols) };
    let cost = |i: usize, j: usize| if transposed { c.get(j, i) } else { c.get(i, j) };

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (i, j) = (owner[j] - 1, j - 1);
            if transposed {
                (j, i)
            } else {
                (i, j)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, col)| c.get(r, col)).sum();
    Assignment { pairs, total_cost }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_identity_and_disjoint() {
        let a = BBox::new(0.4, 0.5, 0.2, 0.3);
        assert!((giou(a, a).unwrap() - 1.0).abs() < 1e-15);
        let p = BBox::from_ltwh(0.0, 0.0, 1.0, 1.0);
        let q = BBox::from_ltwh(2.0, 0.0, 1.0, 1.0);
        assert!((giou(p, q).unwrap() + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn giou_rejects_degenerate_boxes() {
        let a = BBox::new(0.5, 0.5, 0.0, 0.1);
        assert!(matches!(giou(a, a), Err(Error::Geometry(_))));
        assert!(matches!(
            bbox_cost(BBox::new(0.5, 0.5, 0.1, -0.1), a, CostWeights::default()),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn cost_substitution_examples() {
        let b = BBox::new(0.3, 0.6, 0.1, 0.2);
        let w = CostWeights::default();
        assert_eq!(bbox_cost(b, b, w).unwrap(), 0.0);
        assert_eq!(matching_cost(0, b, &[1.0, 0.0], b, w).unwrap(), -1.0);
        let c = combine_bbox_cost(0.1, 0.2, w);
        assert!((c - 0.9).abs() < 1e-12);
        assert!((combine_matching_cost(0.5, c) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn hungarian_small_cases() {
        let c = CostMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);

        let a = hungarian(&CostMatrix::new(1, 1, vec![7.0]).unwrap());
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 7.0);

        let a = hungarian(&CostMatrix::new(0, 3, vec![]).unwrap());
        assert!(a.pairs.is_empty());
    }

    #[test]
    fn hungarian_rectangular_both_orientations() {
        // wide: 2 gt, 3 preds
        let c = CostMatrix::new(2, 3, vec![5.0, 1.0, 9.0, 4.0, 1.0, 2.0]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 1), (1, 2)]);
        assert_eq!(a.total_cost, 3.0);
        // tall: 3 gt, 2 preds
        let c = CostMatrix::new(3, 2, vec![5.0, 4.0, 1.0, 1.0, 9.0, 2.0]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(1, 0), (2, 1)]);
        assert_eq!(a.total_cost, 3.0);
    }

    #[test]
    fn hungarian_ties_prefer_low_indices() {
        let c = CostMatrix::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(hungarian(&c).pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn cost_matrix_rejects_non_finite() {
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
    }
}
