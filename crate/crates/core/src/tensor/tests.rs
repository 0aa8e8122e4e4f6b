use alloc::vec;

use super::*;
use crate::error::Error;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
}

#[test]
fn matmul_identity_and_zero() {
    let tape = Tape::new();
    let i2 = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let m = tape.constant(Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap());
    assert_eq!(i2.matmul(m).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(Tensor::row(&[1.0, 2.0]));
    let z = tape.constant(Tensor::zeros(2, 1));
    assert_eq!(a.matmul(z).unwrap().value().data(), &[0.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(2, 3));
    let b = tape.constant(Tensor::zeros(2, 3));
    match a.matmul(b) {
        Err(Error::Dimension { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn tensor_rejects_empty_dimension() {
    assert!(matches!(Tensor::new(1, 0, vec![]), Err(Error::Dimension { .. })));
    assert!(matches!(Tensor::new(2, 2, vec![0.0; 3]), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = tape.constant(Tensor::row(&[1.0, 1.0, 1.0])).softmax_rows().unwrap();
    assert!(close(s.value().data(), &[1.0 / 3.0; 3], 1e-12));

    let s = tape
        .constant(Tensor::row(&[0.0, core::f64::consts::LN_2]))
        .softmax_rows()
        .unwrap();
    assert!(close(s.value().data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-12));

    let s = tape.constant(Tensor::row(&[1000.0, 1000.0])).softmax_rows().unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let r = tape.constant(Tensor::row(&[-1.0, 2.0])).relu().unwrap();
    assert_eq!(r.value().data(), &[0.0, 2.0]);

    let x = tape.constant(Tensor::row(&[3.0, 3.0, 3.0, 3.0]));
    let g = tape.constant(Tensor::ones(1, 4));
    let b = tape.constant(Tensor::zeros(1, 4));
    let y = x.layer_norm(g, b).unwrap();
    assert_eq!(y.value().data(), &[0.0; 4]);
}

#[test]
fn backward_simple_cases() {
    let tape = Tape::new();
    let x = tape.param(Tensor::row(&[0.3, -2.0, 7.0]));
    let grads = x.sum().unwrap().backward().unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.param(Tensor::row(&[1.0, 2.0]));
    let grads = x.mul(x).unwrap().sum().unwrap().backward().unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.param(Tensor::row(&[1.0, 2.0]));
    assert!(matches!(x.relu().unwrap().backward(), Err(Error::Usage(_))));
}

#[test]
fn non_finite_results_name_the_op() {
    let tape = Tape::new();
    let x = tape.param(Tensor::row(&[0.0, 1.0]));
    assert_eq!(x.ln().unwrap_err(), Error::NonFinite { op: "ln" });
}

#[test]
fn constants_carry_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::row(&[1.0, 2.0]));
    let p = tape.param(Tensor::row(&[3.0, 4.0]));
    let grads = c.mul(p).unwrap().sum().unwrap().backward().unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn unreached_params_get_zero_gradient() {
    let tape = Tape::new();
    let unused = tape.param(Tensor::row(&[5.0]));
    let x = tape.param(Tensor::row(&[1.0]));
    let grads = x.sum().unwrap().backward().unwrap();
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0]);
}
