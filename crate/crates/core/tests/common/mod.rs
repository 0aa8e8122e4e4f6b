//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use mo3tr_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Values bounded away from zero so kinked ops (relu, abs) are smooth at the
/// probe point.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(i, p) * b.get(p, j);
            }
        }
    }
    Tensor::new(m, n, out).unwrap()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

/// Central finite differences (step `h`) of the scalar produced by `f` with
/// respect to every entry of every input, compared with reverse-mode
/// gradients. Returns the worst relative error.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = loss.backward().unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect();

    let eval = |probe: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.param(t.clone())).collect();
        f(&tape, &vars).value().item()
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[idx] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k].data()[idx], numeric));
        }
    }
    worst
}

/// Exhaustive minimum over all injective row→column maps.
pub fn brute_force_assignment(costs: &[f64], rows: usize, cols: usize) -> f64 {
    fn rec(costs: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>) -> f64 {
        if r == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                best = best.min(costs[r * cols + c] + rec(costs, rows, cols, r + 1, used));
                used[c] = false;
            }
        }
        best
    }
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    if rows <= cols {
        rec(costs, rows, cols, 0, &mut vec![false; cols])
    } else {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = costs[r * cols + c];
            }
        }
        rec(&t, cols, rows, 0, &mut vec![false; rows])
    }
}
