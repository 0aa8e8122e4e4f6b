//! Attention building blocks, positional encodings, the temporal and spatial
//! Transformer stacks and the output heads.

mod attention;
pub mod posenc;
mod stacks;

pub use attention::{AttentionOutput, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use posenc::{pe_grid, pe_time, pe_time_rows};
pub use stacks::{
    DecodeOutput, DecoderLayer, Dims, EncoderLayer, Heads, HeadsOutput, SpatialTransformer,
    TemporalLayer, TemporalOutput, TemporalTransformer, BACKGROUND_CLASS, OBJECT_CLASS,
};
