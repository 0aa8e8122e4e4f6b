//! Fixed sinusoidal positional encodings.

use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Sinusoidal encoding of a 1-D position: entry `2i` is
/// `sin(t / 10000^(2i/d))`, entry `2i + 1` the matching cosine.
pub fn pe_time(t: f64, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d);
    for k in 0..d {
        let i2 = (k - k % 2) as f64;
        let angle = t / libm::pow(10000.0, i2 / d as f64);
        out.push(if k % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
    }
    out
}

/// `rows × d` matrix whose row `k` is `pe_time(positions[k])`.
pub fn pe_time_rows(positions: &[usize], d: usize) -> Tensor {
    let data = positions.iter().flat_map(|&p| pe_time(p as f64, d)).collect();
    Tensor::new(positions.len(), d, data).expect("non-empty positions")
}

/// 2-D grid encoding: for cell `(r, c)` (row-major index `r * width + c`) the
/// first `d / 2` entries encode the row and the last `d / 2` the column.
pub fn pe_grid(height: usize, width: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = Vec::with_capacity(height * width * d);
    for r in 0..height {
        let row_pe = pe_time(r as f64, half);
        for c in 0..width {
            data.extend_from_slice(&row_pe);
            data.extend(pe_time(c as f64, half));
        }
    }
    Tensor::new(height * width, d, data).expect("non-empty grid")
}
