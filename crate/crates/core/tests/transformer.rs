mod common;

use common::*;
use mo3tr_core::params::{Binding, ParamStore};
use mo3tr_core::tensor::{Tape, Tensor};
use mo3tr_core::transformer::{
    pe_grid, pe_time, Dims, EncoderLayer, Heads, LayerNorm, Linear, MultiHeadAttention, SpatialTransformer,
    TemporalTransformer,
};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

type M = Vec<Vec<f64>>;

fn dense(t: &Tensor) -> M {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn close(a: &M, b: &Tensor, tol: f64) {
    assert_eq!((a.len(), a[0].len()), (b.rows(), b.cols()));
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((v - b.get(r, c)).abs() < tol, "({r},{c}): oracle {v} vs {}", b.get(r, c));
        }
    }
}

fn mm(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn linear(store: &ParamStore, l: &Linear, x: &M) -> M {
    let w = dense(store.get(l.w));
    let b = store.get(l.b).data().to_vec();
    mm(x, &w).into_iter().map(|r| r.iter().zip(&b).map(|(v, bb)| v + bb).collect()).collect()
}

fn layer_norm(store: &ParamStore, n: &LayerNorm, x: &M) -> M {
    let g = store.get(n.gamma).data();
    let b = store.get(n.beta).data();
    x.iter()
        .map(|r| {
            let d = r.len() as f64;
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let s = (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(i, v)| (v - mean) / s * g[i] + b[i]).collect()
        })
        .collect()
}

fn softmax(r: &[f64]) -> Vec<f64> {
    let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn relu(a: &M) -> M {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

/// Returns the output and the per-head weights.
fn mha(store: &ParamStore, a: &MultiHeadAttention, q_in: &M, k_in: &M, v_in: &M, mask: Option<&[bool]>) -> (M, Vec<M>) {
    let q = linear(store, &a.query, q_in);
    let k = linear(store, &a.key, k_in);
    let v = linear(store, &a.value, v_in);
    let dh = a.d_model / a.heads;
    let mut joined = vec![vec![0.0; a.d_model]; q.len()];
    let mut weights = Vec::new();
    for h in 0..a.heads {
        let cols = h * dh..(h + 1) * dh;
        let mut w = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    let s: f64 = cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt();
                    if mask.is_some_and(|m| !m[j]) {
                        s - 1e9
                    } else {
                        s
                    }
                })
                .collect();
            let p = softmax(&scores);
            for c in cols.clone() {
                joined[i][c] = p.iter().zip(&v).map(|(pj, vj)| pj * vj[c]).sum();
            }
            w.push(p);
        }
        weights.push(w);
    }
    (linear(store, &a.output, &joined), weights)
}

fn ffn(store: &ParamStore, f: &mo3tr_core::transformer::FeedForward, x: &M) -> M {
    linear(store, &f.down, &relu(&linear(store, &f.up, x)))
}

fn encoder_layer(store: &ParamStore, l: &EncoderLayer, x: &M) -> M {
    let h = layer_norm(store, &l.norm_attn, x);
    let x = add(x, &mha(store, &l.attn, &h, &h, &h, None).0);
    let h = layer_norm(store, &l.norm_ffn, &x);
    add(&x, &ffn(store, &l.ffn, &h))
}

fn pe_rows(pos: &[usize], d: usize) -> M {
    pos.iter().map(|&p| pe_time(p as f64, d)).collect()
}

fn temporal(store: &ParamStore, t: &TemporalTransformer, hist: &M, pos: &[usize], mask: Option<&[bool]>, targets: &[usize]) -> M {
    let d = t.d_model;
    let enc = add(hist, &pe_rows(pos, d));
    let mut q = pe_rows(targets, d);
    for l in &t.layers {
        let keys = layer_norm(store, &l.norm_history, &enc);
        let qn = layer_norm(store, &l.norm_query, &q);
        q = add(&q, &mha(store, &l.attn, &qn, &keys, &keys, mask).0);
        let h = layer_norm(store, &l.norm_ffn, &q);
        q = add(&q, &ffn(store, &l.ffn, &h));
    }
    layer_norm(store, &t.final_norm, &q)
}

fn spatial_encode(store: &ParamStore, s: &SpatialTransformer, cells: &M, pe: &M) -> M {
    let mut x = linear(store, &s.input_proj, cells);
    for l in &s.encoder {
        x = encoder_layer(store, l, &x);
    }
    add(&x, pe)
}

fn spatial_decode(store: &ParamStore, s: &SpatialTransformer, slots: &M, pos: Option<&M>, grid: &M) -> M {
    let with_pos = |x: &M| match pos {
        Some(p) => add(x, p),
        None => x.clone(),
    };
    let mut x = slots.clone();
    for l in &s.decoder {
        let h = layer_norm(store, &l.norm_self, &x);
        let qk = with_pos(&h);
        x = add(&x, &mha(store, &l.self_attn, &qk, &qk, &h, None).0);
        let h = with_pos(&layer_norm(store, &l.norm_cross, &x));
        x = add(&x, &mha(store, &l.cross_attn, &h, grid, grid, None).0);
        let h = layer_norm(store, &l.norm_ffn, &x);
        x = add(&x, &ffn(store, &l.ffn, &h));
    }
    layer_norm(store, &s.final_norm, &x)
}

fn heads(store: &ParamStore, h: &Heads, z: &M) -> (M, M) {
    let logits = linear(store, &h.class, z);
    let probs = logits.iter().map(|r| softmax(r)).collect();
    let x = relu(&linear(store, &h.box_layers[0], z));
    let x = relu(&linear(store, &h.box_layers[1], &x));
    let boxes = linear(store, &h.box_layers[2], &x)
        .into_iter()
        .map(|r| r.into_iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect())
        .collect();
    (probs, boxes)
}

/// Overwrites every parameter, gains and biases included, with random values
/// so that the oracles exercise non-trivial norms and offsets.
fn scramble(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale) + if *v == 1.0 { 1.0 } else { 0.0 };
        }
    }
}

const DIMS: Dims = Dims {
    d_model: 8,
    heads: 2,
    ffn_hidden: 12,
};

#[test]
fn multi_head_attention_matches_dense_oracle() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let a = MultiHeadAttention::new(&mut store, &mut r, "a", 8, 2).unwrap();
    scramble(&mut store, &mut r, 0.7);
    let q = random_tensor(&mut r, 3, 8, 1.0);
    let kv = random_tensor(&mut r, 5, 8, 1.0);
    let mask = [true, false, true, true, false];
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let out = a.forward(&b, tape.constant(q.clone()), tape.constant(kv.clone()), tape.constant(kv.clone()), Some(&mask)).unwrap();
    let (o, w) = mha(&store, &a, &dense(&q), &dense(&kv), &dense(&kv), Some(&mask));
    close(&o, &out.out.value(), 1e-10);
    for (h, wh) in w.iter().enumerate() {
        close(wh, &out.weights[h].value(), 1e-12);
        for row in wh {
            assert_eq!(row[1], 0.0);
            assert_eq!(row[4], 0.0);
        }
    }
}

#[test]
fn encoder_layer_matches_dense_oracle() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let l = EncoderLayer::new(&mut store, &mut r, "e", DIMS).unwrap();
    scramble(&mut store, &mut r, 0.5);
    let x = random_tensor(&mut r, 6, 8, 1.0);
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let out = l.forward(&b, tape.constant(x.clone())).unwrap().value();
    close(&encoder_layer(&store, &l, &dense(&x)), &out, 1e-10);
}

#[test]
fn temporal_transformer_matches_dense_oracle() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let t = TemporalTransformer::new(&mut store, &mut r, "t", DIMS, 2).unwrap();
    scramble(&mut store, &mut r, 0.5);
    let hist = random_tensor(&mut r, 4, 8, 1.0);
    let pos = [3, 5, 6, 9];
    let mask = [true, true, false, true];
    let targets = [10, 12];
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let out = t.predict(&b, tape.constant(hist.clone()), &pos, Some(&mask), &targets).unwrap();
    close(&temporal(&store, &t, &dense(&hist), &pos, Some(&mask), &targets), &out.embeddings.value(), 1e-10);
    assert_eq!(out.weights.len(), 2);
    assert_eq!(out.weights[0].len(), 2);
}

#[test]
fn spatial_transformer_and_heads_match_dense_oracle() {
    let mut r = rng(13);
    let mut store = ParamStore::new();
    let s = SpatialTransformer::new(&mut store, &mut r, "s", DIMS, 3, 2, 2).unwrap();
    let h = Heads::new(&mut store, &mut r, "h", 8);
    scramble(&mut store, &mut r, 0.5);
    let cells = random_tensor(&mut r, 12, 3, 1.0);
    let slots = random_tensor(&mut r, 4, 8, 1.0);
    let pos = random_tensor(&mut r, 4, 8, 1.0);
    let pe = pe_grid(3, 4, 8);
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let grid = s.encode(&b, tape.constant(cells.clone()), tape.constant(pe.clone())).unwrap();
    let grid_oracle = spatial_encode(&store, &s, &dense(&cells), &dense(&pe));
    close(&grid_oracle, &grid.value(), 1e-10);
    let dec = s.decode(&b, tape.constant(slots.clone()), Some(tape.constant(pos.clone())), grid).unwrap();
    let dec_oracle = spatial_decode(&store, &s, &dense(&slots), Some(&dense(&pos)), &grid_oracle);
    close(&dec_oracle, &dec.embeddings.value(), 1e-9);
    let out = h.apply(&b, dec.embeddings).unwrap();
    let (probs, boxes) = heads(&store, &h, &dec_oracle);
    close(&probs, &out.probs.value(), 1e-9);
    close(&boxes, &out.boxes.value(), 1e-9);
}

fn rows_sum_to_one(w: &Tensor) {
    for r in 0..w.rows() {
        let s: f64 = w.row_slice(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_attention_row_sums_to_one(seed in 0u64..1000, n_hist in 1usize..7, n_slots in 1usize..6, scale in 0.1f64..4.0) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let t = TemporalTransformer::new(&mut store, &mut r, "t", DIMS, 2).unwrap();
        let s = SpatialTransformer::new(&mut store, &mut r, "s", DIMS, 2, 1, 2).unwrap();
        scramble(&mut store, &mut r, scale);
        let hist = random_tensor(&mut r, n_hist, 8, scale);
        let pos: Vec<usize> = (0..n_hist).map(|k| 30 - n_hist + k).collect();
        let mut mask: Vec<bool> = (0..n_hist).map(|_| r.random_bool(0.6)).collect();
        mask[n_hist - 1] = true;
        let tape = Tape::new();
        let b = Binding::frozen(&tape, &store);
        let out = t.predict(&b, tape.constant(hist), &pos, Some(&mask), &[30, 31]).unwrap();
        for layer in &out.weights {
            for w in layer {
                let w = w.value();
                rows_sum_to_one(&w);
                for (k, m) in mask.iter().enumerate() {
                    if !m {
                        for row in 0..w.rows() {
                            prop_assert_eq!(w.get(row, k), 0.0);
                        }
                    }
                }
            }
        }
        let cells = random_tensor(&mut r, 9, 2, scale);
        let grid = s.encode(&b, tape.constant(cells), tape.constant(pe_grid(3, 3, 8))).unwrap();
        let slots = random_tensor(&mut r, n_slots, 8, scale);
        let dec = s.decode(&b, tape.constant(slots), None, grid).unwrap();
        for w in dec.self_weights.iter().chain(&dec.cross_weights).flatten() {
            rows_sum_to_one(&w.value());
        }
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = perm.iter().map(|&p| t.row_slice(p)).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn slot_self_attention_is_permutation_equivariant_without_positions() {
    let mut r = rng(14);
    let mut store = ParamStore::new();
    let s = SpatialTransformer::new(&mut store, &mut r, "s", DIMS, 3, 1, 2).unwrap();
    scramble(&mut store, &mut r, 0.6);
    let grid = random_tensor(&mut r, 10, 8, 1.0);
    let slots = random_tensor(&mut r, 5, 8, 1.0);
    let perm = [3, 0, 4, 2, 1];
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let g = tape.constant(grid);
    let base = s.decode(&b, tape.constant(slots.clone()), None, g).unwrap().embeddings.value();
    let moved = s.decode(&b, tape.constant(permute_rows(&slots, &perm)), None, g).unwrap().embeddings.value();
    assert!(permute_rows(&base, &perm).max_abs_diff(&moved) < 1e-9);

    // Same for the frame encoder once the grid field is zero.
    let cells = random_tensor(&mut r, 10, 3, 1.0);
    let cperm = [9, 2, 5, 0, 1, 8, 3, 7, 6, 4];
    let zero = tape.constant(Tensor::zeros(10, 8));
    let base = s.encode(&b, tape.constant(cells.clone()), zero).unwrap().value();
    let moved = s.encode(&b, tape.constant(permute_rows(&cells, &cperm)), zero).unwrap().value();
    assert!(permute_rows(&base, &cperm).max_abs_diff(&moved) < 1e-9);
}

#[test]
fn temporal_prediction_depends_on_history_order() {
    let mut r = rng(15);
    let mut store = ParamStore::new();
    let t = TemporalTransformer::new(&mut store, &mut r, "t", DIMS, 2).unwrap();
    let hist = random_tensor(&mut r, 4, 8, 1.0);
    let pos = [26, 27, 28, 29];
    let tape = Tape::new();
    let b = Binding::frozen(&tape, &store);
    let predict = |h: &Tensor, p: &[usize]| t.predict(&b, tape.constant(h.clone()), p, None, &[30]).unwrap().embeddings.value();
    let base = predict(&hist, &pos);

    // Reversing which entry happened when changes the prediction.
    let reversed = permute_rows(&hist, &[3, 2, 1, 0]);
    assert!(base.max_abs_diff(&predict(&reversed, &pos)) > 1e-3);

    // Reordering rows together with their times is only a relabeling.
    let perm = [2, 0, 3, 1];
    let moved_pos: Vec<usize> = perm.iter().map(|&k| pos[k]).collect();
    assert!(base.max_abs_diff(&predict(&permute_rows(&hist, &perm), &moved_pos)) < 1e-12);
}

/// Central differences through temporal prediction, slot decoding and both
/// heads, against reverse mode, for every parameter scalar.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut r = rng(16);
    let dims = Dims {
        d_model: 4,
        heads: 2,
        ffn_hidden: 6,
    };
    let mut store = ParamStore::new();
    let t = TemporalTransformer::new(&mut store, &mut r, "t", dims, 1).unwrap();
    let s = SpatialTransformer::new(&mut store, &mut r, "s", dims, 2, 1, 1).unwrap();
    let h = Heads::new(&mut store, &mut r, "h", 4);
    scramble(&mut store, &mut r, 0.8);
    let hist = random_tensor(&mut r, 3, 4, 1.0);
    let cells = random_tensor(&mut r, 4, 2, 1.0);
    let queries = random_tensor(&mut r, 2, 4, 1.0);
    let weights = random_tensor(&mut r, 3, 4, 1.0);
    let class_w = random_tensor(&mut r, 3, 2, 1.0);

    let loss = |store: &ParamStore, trainable: bool| -> (f64, Vec<Option<Tensor>>) {
        let tape = Tape::new();
        let b = if trainable { Binding::trainable(&tape, store) } else { Binding::frozen(&tape, store) };
        let tracked = t.predict(&b, tape.constant(hist.clone()), &[7, 8, 9], None, &[10]).unwrap().embeddings;
        let slots = mo3tr_core::tensor::Var::concat_rows(&[tracked, tape.constant(queries.clone())]).unwrap();
        let grid = s.encode(&b, tape.constant(cells.clone()), tape.constant(pe_grid(2, 2, 4))).unwrap();
        let z = s.decode(&b, slots, None, grid).unwrap().embeddings;
        let out = h.apply(&b, z).unwrap();
        let l = out
            .boxes
            .mul(tape.constant(weights.clone()))
            .unwrap()
            .sum()
            .unwrap()
            .add(out.logits.log_softmax_rows().unwrap().mul(tape.constant(class_w.clone())).unwrap().sum().unwrap())
            .unwrap();
        let v = l.value().item();
        if trainable {
            let g = l.backward().unwrap();
            (v, b.collect(&g))
        } else {
            (v, Vec::new())
        }
    };

    let (_, analytic) = loss(&store, true);
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let plus = loss(&store, false).0;
            store.get_mut(id).data_mut()[k] = orig - step;
            let minus = loss(&store, false).0;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}
