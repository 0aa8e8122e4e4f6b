use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::attention::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use super::posenc::pe_time_rows;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

/// Pre-norm self-attention block: `x += SA(LN x)`, `x += FFN(LN x)`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dims: Dims) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dims.d_model),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dims.d_model, dims.heads)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dims.d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dims.d_model, dims.ffn_hidden),
        })
    }

    pub fn forward<'t>(&self, b: &Binding<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.norm_attn.forward(b, x)?;
        let x = x.add(self.attn.forward(b, h, h, h, None)?.out)?;
        let h = self.norm_ffn.forward(b, x)?;
        x.add(self.ffn.forward(b, h)?)
    }
}

/// One temporal layer: the request tokens attend over the time-encoded
/// history, then pass through a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct TemporalLayer {
    pub norm_query: LayerNorm,
    pub norm_history: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl TemporalLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dims: Dims) -> Result<Self> {
        Ok(Self {
            norm_query: LayerNorm::new(store, &format!("{name}.norm_query"), dims.d_model),
            norm_history: LayerNorm::new(store, &format!("{name}.norm_history"), dims.d_model),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dims.d_model, dims.heads)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dims.d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dims.d_model, dims.ffn_hidden),
        })
    }
}

/// Output of [`TemporalTransformer::predict`].
pub struct TemporalOutput<'t> {
    /// One predicted embedding per requested time, `targets × d_model`.
    pub embeddings: Var<'t>,
    /// `[layer][head]`, each `targets × history` attention weights.
    pub weights: Vec<Vec<Var<'t>>>,
}

/// Attention over one object's embedding history, queried with the
/// positional encoding of the requested time.
#[derive(Clone, Debug)]
pub struct TemporalTransformer {
    pub d_model: usize,
    pub layers: Vec<TemporalLayer>,
    pub final_norm: LayerNorm,
}

impl TemporalTransformer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dims: Dims, layers: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| TemporalLayer::new(store, rng, &format!("{name}.{i}"), dims))
            .collect::<Result<_>>()?;
        Ok(Self {
            d_model: dims.d_model,
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dims.d_model),
        })
    }

    /// Predicts embeddings at the time positions `targets` from a history
    /// whose row `k` sits at time position `positions[k]`.
    ///
    /// The history is time-encoded by adding `pe_time(positions[k])`; each
    /// request starts as the bare `pe_time(target)`. `mask[k] == false`
    /// removes row `k` (padding) from the keys.
    pub fn predict<'t>(
        &self,
        b: &Binding<'t, '_>,
        history: Var<'t>,
        positions: &[usize],
        mask: Option<&[bool]>,
        targets: &[usize],
    ) -> Result<TemporalOutput<'t>> {
        if positions.len() != history.rows() {
            return Err(Error::Dimension {
                op: "temporal_predict",
                lhs: history.shape().to_vec(),
                rhs: alloc::vec![positions.len()],
            });
        }
        if targets.is_empty() {
            return Err(Error::Usage("temporal_predict needs at least one target time".into()));
        }
        let tape = b.tape();
        let encoded = history.add(tape.constant(pe_time_rows(positions, self.d_model)))?;
        let mut query = tape.constant(pe_time_rows(targets, self.d_model));
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let keys = layer.norm_history.forward(b, encoded)?;
            let q = layer.norm_query.forward(b, query)?;
            let att = layer.attn.forward(b, q, keys, keys, mask)?;
            query = query.add(att.out)?;
            let h = layer.norm_ffn.forward(b, query)?;
            query = query.add(layer.ffn.forward(b, h)?)?;
            weights.push(att.weights);
        }
        Ok(TemporalOutput {
            embeddings: self.final_norm.forward(b, query)?,
            weights,
        })
    }
}

/// Decoder layer: self-attention among object slots, then cross-attention
/// from the slots onto the encoded frame, then a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dims: Dims) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dims.d_model),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), dims.d_model, dims.heads)?,
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dims.d_model),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), dims.d_model, dims.heads)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), dims.d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dims.d_model, dims.ffn_hidden),
        })
    }
}

pub struct DecodeOutput<'t> {
    pub embeddings: Var<'t>,
    /// `[layer][head]` slot-to-slot weights.
    pub self_weights: Vec<Vec<Var<'t>>>,
    /// `[layer][head]` slot-to-cell weights.
    pub cross_weights: Vec<Vec<Var<'t>>>,
}

/// Frame encoder (per-cell input projection plus self-attention layers) and
/// the alternating self/cross-attention decoder.
#[derive(Clone, Debug)]
pub struct SpatialTransformer {
    pub input_proj: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
}

impl SpatialTransformer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: Dims,
        channels: usize,
        encoder_layers: usize,
        decoder_layers: usize,
    ) -> Result<Self> {
        let input_proj = Linear::new(store, rng, &format!("{name}.input_proj"), channels, dims.d_model);
        let encoder = (0..encoder_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.encoder.{i}"), dims))
            .collect::<Result<_>>()?;
        let decoder = (0..decoder_layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("{name}.decoder.{i}"), dims))
            .collect::<Result<_>>()?;
        Ok(Self {
            input_proj,
            encoder,
            decoder,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dims.d_model),
        })
    }

    /// `cells` is `(H·W) × C`; returns the `(H·W) × d_model` grid with the 2-D
    /// positional field added after the encoder layers.
    pub fn encode<'t>(&self, b: &Binding<'t, '_>, cells: Var<'t>, grid_pe: Var<'t>) -> Result<Var<'t>> {
        let mut x = self.input_proj.forward(b, cells)?;
        for layer in &self.encoder {
            x = layer.forward(b, x)?;
        }
        x.add(grid_pe)
    }

    /// Refines the slot set against the encoded grid. `slot_pos`, when given,
    /// is added to the slot queries (and self-attention keys) of every layer.
    pub fn decode<'t>(
        &self,
        b: &Binding<'t, '_>,
        slots: Var<'t>,
        slot_pos: Option<Var<'t>>,
        grid: Var<'t>,
    ) -> Result<DecodeOutput<'t>> {
        let mut s = slots;
        let mut self_weights = Vec::with_capacity(self.decoder.len());
        let mut cross_weights = Vec::with_capacity(self.decoder.len());
        let with_pos = |x: Var<'t>| -> Result<Var<'t>> {
            match slot_pos {
                Some(p) => x.add(p),
                None => Ok(x),
            }
        };
        for layer in &self.decoder {
            let h = layer.norm_self.forward(b, s)?;
            let qk = with_pos(h)?;
            let att = layer.self_attn.forward(b, qk, qk, h, None)?;
            s = s.add(att.out)?;
            self_weights.push(att.weights);

            let h = with_pos(layer.norm_cross.forward(b, s)?)?;
            let att = layer.cross_attn.forward(b, h, grid, grid, None)?;
            s = s.add(att.out)?;
            cross_weights.push(att.weights);

            let h = layer.norm_ffn.forward(b, s)?;
            s = s.add(layer.ffn.forward(b, h)?)?;
        }
        Ok(DecodeOutput {
            embeddings: self.final_norm.forward(b, s)?,
            self_weights,
            cross_weights,
        })
    }
}

/// Classification (object / background) and box regression heads.
#[derive(Clone, Debug)]
pub struct Heads {
    pub class: Linear,
    pub box_layers: [Linear; 3],
}

pub struct HeadsOutput<'t> {
    /// `slots × 2` logits, column 0 = object, column 1 = background.
    pub logits: Var<'t>,
    pub probs: Var<'t>,
    /// `slots × 4` boxes `(cx, cy, w, h)` in `(0, 1)`.
    pub boxes: Var<'t>,
}

pub const OBJECT_CLASS: usize = 0;
pub const BACKGROUND_CLASS: usize = 1;

impl Heads {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            class: Linear::new(store, rng, &format!("{name}.class"), d, 2),
            box_layers: [
                Linear::new(store, rng, &format!("{name}.box.0"), d, d),
                Linear::new(store, rng, &format!("{name}.box.1"), d, d),
                Linear::new(store, rng, &format!("{name}.box.2"), d, 4),
            ],
        }
    }

    pub fn boxes<'t>(&self, b: &Binding<'t, '_>, z: Var<'t>) -> Result<Var<'t>> {
        let h = self.box_layers[0].forward(b, z)?.relu()?;
        let h = self.box_layers[1].forward(b, h)?.relu()?;
        self.box_layers[2].forward(b, h)?.sigmoid()
    }

    pub fn apply<'t>(&self, b: &Binding<'t, '_>, z: Var<'t>) -> Result<HeadsOutput<'t>> {
        let logits = self.class.forward(b, z)?;
        Ok(HeadsOutput {
            logits,
            probs: logits.softmax_rows()?,
            boxes: self.boxes(b, z)?,
        })
    }
}
