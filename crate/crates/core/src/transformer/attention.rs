use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

/// Additive score for masked keys; underflows to an exact zero after the
/// softmax's max subtraction.
const MASKED_SCORE: f64 = -1e9;

/// Dense layer `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, output: usize) -> Self {
        Self {
            w: store.add_xavier(format!("{name}.w"), input, output, rng),
            b: store.add_zeros(format!("{name}.b"), 1, output),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(b.var(self.w))?.add_row(b.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), 1, d),
            beta: store.add_zeros(format!("{name}.beta"), 1, d),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(b.var(self.gamma), b.var(self.beta))
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}.up"), d, hidden),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, d),
        }
    }

    pub fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.up.forward(b, x)?.relu()?;
        self.down.forward(b, h)
    }
}

/// Multi-head scaled dot-product attention with separate query, key, value
/// and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

pub struct AttentionOutput<'t> {
    pub out: Var<'t>,
    /// One `queries × keys` weight matrix per head.
    pub weights: Vec<Var<'t>>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            d_model,
            query: Linear::new(store, rng, &format!("{name}.q"), d_model, d_model),
            key: Linear::new(store, rng, &format!("{name}.k"), d_model, d_model),
            value: Linear::new(store, rng, &format!("{name}.v"), d_model, d_model),
            output: Linear::new(store, rng, &format!("{name}.o"), d_model, d_model),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// `softmax(q kᵀ / √d_head) v` per head, heads concatenated and projected.
    ///
    /// `key_mask[j] == false` excludes key `j`; at least one key must remain.
    pub fn forward<'t>(
        &self,
        b: &Binding<'t, '_>,
        queries: Var<'t>,
        keys: Var<'t>,
        values: Var<'t>,
        key_mask: Option<&[bool]>,
    ) -> Result<AttentionOutput<'t>> {
        let n_keys = keys.rows();
        if values.rows() != n_keys {
            return Err(Error::Dimension {
                op: "attention",
                lhs: keys.shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        let mask_row = match key_mask {
            Some(mask) => {
                if mask.len() != n_keys {
                    return Err(Error::Dimension {
                        op: "attention mask",
                        lhs: alloc::vec![mask.len()],
                        rhs: alloc::vec![n_keys],
                    });
                }
                if !mask.iter().any(|&m| m) {
                    return Err(Error::EmptyContext("attention"));
                }
                let row: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { MASKED_SCORE }).collect();
                Some(b.tape().constant(Tensor::row(&row)))
            }
            None => None,
        };

        let q = self.query.forward(b, queries)?;
        let k = self.key.forward(b, keys)?;
        let v = self.value.forward(b, values)?;
        let dh = self.head_dim();
        let scale = 1.0 / libm::sqrt(dh as f64);

        let mut head_outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    q.slice_cols(h * dh, dh)?,
                    k.slice_cols(h * dh, dh)?,
                    v.slice_cols(h * dh, dh)?,
                )
            };
            let mut scores = qh.matmul(kh.transpose()?)?.mul_scalar(scale)?;
            if let Some(m) = mask_row {
                scores = scores.add_row(m)?;
            }
            let a = scores.softmax_rows()?;
            head_outs.push(a.matmul(vh)?);
            weights.push(a);
        }
        let joined = if self.heads == 1 {
            head_outs[0]
        } else {
            Var::concat_cols(&head_outs)?
        };
        Ok(AttentionOutput {
            out: self.output.forward(b, joined)?,
            weights,
        })
    }
}
