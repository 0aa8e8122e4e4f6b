mod common;

use common::*;
use mo3tr_core::tensor::{Tape, Tensor, Var};
use proptest::prelude::*;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = random_tensor(&mut r, 3, 4, 2.0);
    let b = random_tensor(&mut r, 4, 2, 2.0);
    let tape = Tape::new();
    let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    assert!(out.value().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn add_matches_elementwise_loop() {
    let mut r = rng(2);
    let a = random_tensor(&mut r, 3, 5, 3.0);
    let b = random_tensor(&mut r, 3, 5, 3.0);
    let tape = Tape::new();
    let out = tape.constant(a.clone()).add(tape.constant(b.clone())).unwrap().value();
    for i in 0..a.len() {
        assert!((out.data()[i] - (a.data()[i] + b.data()[i])).abs() < 1e-12);
    }
}

fn check(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
    let err = grad_check(inputs, STEP, f);
    assert!(err < TOL, "relative error {err}");
}

/// Weighted sum with fixed pseudo-random weights so each output entry gets a
/// distinct upstream gradient.
fn probe<'t>(tape: &'t Tape, v: Var<'t>) -> Var<'t> {
    let [r, c] = v.shape();
    let w: Vec<f64> = (0..r * c).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    v.mul(tape.constant(Tensor::new(r, c, w).unwrap()))
        .unwrap()
        .sum()
        .unwrap()
}

#[test]
fn grad_matmul_transpose() {
    let mut r = rng(3);
    let a = random_tensor(&mut r, 3, 4, 1.0);
    let b = random_tensor(&mut r, 4, 2, 1.0);
    check(&[a.clone(), b.clone()], |t, v| probe(t, v[0].matmul(v[1]).unwrap()));
    check(&[a], |t, v| probe(t, v[0].transpose().unwrap()));
}

#[test]
fn grad_binary_elementwise() {
    let mut r = rng(4);
    let a = random_away_from_zero(&mut r, 2, 3);
    let b = random_away_from_zero(&mut r, 2, 3);
    let ins = [a, b];
    check(&ins, |t, v| probe(t, v[0].add(v[1]).unwrap()));
    check(&ins, |t, v| probe(t, v[0].sub(v[1]).unwrap()));
    check(&ins, |t, v| probe(t, v[0].mul(v[1]).unwrap()));
    check(&ins, |t, v| probe(t, v[0].div(v[1]).unwrap()));
    check(&ins, |t, v| probe(t, v[0].minimum(v[1]).unwrap()));
    check(&ins, |t, v| probe(t, v[0].maximum(v[1]).unwrap()));
}

#[test]
fn grad_unary_elementwise() {
    let mut r = rng(5);
    let a = random_away_from_zero(&mut r, 3, 3);
    let ins = [a.clone()];
    check(&ins, |t, v| probe(t, v[0].relu().unwrap()));
    check(&ins, |t, v| probe(t, v[0].sigmoid().unwrap()));
    check(&ins, |t, v| probe(t, v[0].abs().unwrap()));
    check(&ins, |t, v| probe(t, v[0].mul_scalar(-2.5).unwrap()));
    check(&ins, |t, v| probe(t, v[0].add_scalar(0.7).unwrap()));
    check(&ins, |t, v| probe(t, v[0].clamp_min(0.05).unwrap()));
    check(&ins, |t, v| probe(t, v[0].abs().unwrap().add_scalar(0.1).unwrap().ln().unwrap()));
    check(&ins, |_, v| v[0].mean().unwrap());
}

#[test]
fn grad_rowwise_ops() {
    let mut r = rng(6);
    let x = random_tensor(&mut r, 3, 5, 2.0);
    check(&[x.clone()], |t, v| probe(t, v[0].softmax_rows().unwrap()));
    check(&[x.clone()], |t, v| probe(t, v[0].log_softmax_rows().unwrap()));
    let gamma = random_tensor(&mut r, 1, 5, 1.5);
    let beta = random_tensor(&mut r, 1, 5, 1.0);
    check(&[x.clone(), gamma, beta], |t, v| {
        probe(t, v[0].layer_norm(v[1], v[2]).unwrap())
    });
    let row = random_tensor(&mut r, 1, 5, 1.0);
    check(&[x, row], |t, v| probe(t, v[0].add_row(v[1]).unwrap()));
}

#[test]
fn grad_structural_ops() {
    let mut r = rng(7);
    let a = random_tensor(&mut r, 2, 3, 1.0);
    let b = random_tensor(&mut r, 3, 3, 1.0);
    let c = random_tensor(&mut r, 2, 2, 1.0);
    check(&[a.clone(), b.clone()], |t, v| {
        probe(t, Var::concat_rows(&[v[0], v[1], v[0]]).unwrap())
    });
    check(&[a.clone(), c], |t, v| probe(t, Var::concat_cols(&[v[0], v[1]]).unwrap()));
    check(&[b.clone()], |t, v| probe(t, v[0].slice_rows(1, 2).unwrap()));
    check(&[b.clone()], |t, v| probe(t, v[0].slice_cols(1, 1).unwrap()));
    check(&[b], |t, v| probe(t, v[0].gather_rows(&[2, 0, 2]).unwrap()));
}

#[test]
fn grad_three_layer_mlp() {
    let mut r = rng(8);
    let inputs = [
        random_tensor(&mut r, 4, 3, 1.0),
        random_tensor(&mut r, 3, 6, 0.8),
        random_tensor(&mut r, 1, 6, 0.3),
        random_tensor(&mut r, 6, 6, 0.8),
        random_tensor(&mut r, 1, 6, 0.3),
        random_tensor(&mut r, 6, 2, 0.8),
    ];
    check(&inputs, |_, v| {
        let h = v[0].matmul(v[1]).unwrap().add_row(v[2]).unwrap().relu().unwrap();
        let h = h.matmul(v[3]).unwrap().add_row(v[4]).unwrap().sigmoid().unwrap();
        let o = h.matmul(v[5]).unwrap();
        o.mul(o).unwrap().sum().unwrap()
    });
}

#[test]
fn backward_is_deterministic() {
    let mut r = rng(9);
    let x = random_tensor(&mut r, 3, 4, 1.0);
    let w = random_tensor(&mut r, 4, 4, 1.0);
    let run = || {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.param(w.clone());
        let loss = xv.matmul(wv).unwrap().softmax_rows().unwrap().mul(xv).unwrap().sum().unwrap();
        let g = loss.backward().unwrap();
        (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_commute_with_permutation(
        row in prop::collection::vec(-50.0f64..50.0, 1..8),
        seed in 0u64..1000,
    ) {
        let n = row.len();
        let mut perm: Vec<usize> = (0..n).collect();
        // Fisher-Yates driven by the seed
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted: Vec<f64> = perm.iter().map(|&i| row[i]).collect();
        let tape = Tape::new();
        let a = tape.constant(Tensor::row(&row)).softmax_rows().unwrap().value();
        let b = tape.constant(Tensor::row(&permuted)).softmax_rows().unwrap().value();
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!(a.data()[i] >= 0.0);
            prop_assert!((b.data()[k] - a.data()[i]).abs() < 1e-15);
        }
    }
}
