//! Learnable building blocks: stochastic MLPs, embeddings, self-attention,
//! sensor encoders, the pose decoder and the auxiliary lifter.

mod embed;
mod encoders;
mod mlp;
mod model;

pub use embed::{positional_embed, SelfAttention, TokenKind, TypeEmbedding};
pub use encoders::{decode, Decoder, Encoder, ImageEncoder};
pub use mlp::{column_streams, dropout_columns, snn_sample, Activation, Noise, SnnSpec};
pub use model::{AmdfModel, GainMode, ModelConfig, QUERY};
