use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Sinusoidal position codes, one column per position:
/// rows `2i` hold `sin(pos / 10000^(2i/d))`, rows `2i+1` the matching cosine.
pub fn positional_embed(positions: &[usize], dim: usize, max_len: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Invalid(format!("embedding dimension {dim} must be even")));
    }
    let mut out = Tensor::zeros(dim, positions.len());
    for (c, &pos) in positions.iter().enumerate() {
        if pos >= max_len {
            return Err(Error::Invalid(format!("position {pos} beyond max length {max_len}")));
        }
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let a = pos as f64 * freq;
            out.set(2 * i, c, a.sin());
            out.set(2 * i + 1, c, a.cos());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    State,
    Action,
}

impl TokenKind {
    pub fn index(self) -> usize {
        match self {
            TokenKind::State => 0,
            TokenKind::Action => 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "state" => Ok(TokenKind::State),
            "action" => Ok(TokenKind::Action),
            other => Err(Error::Invalid(format!("unknown token kind {other:?}"))),
        }
    }
}

/// Learned `dim × 2` table of token-type vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeEmbedding {
    pub name: String,
    pub dim: usize,
}

impl TypeEmbedding {
    pub fn init(&self, store: &mut ParameterStore, stream: RngStream) -> Result<()> {
        store.insert_normal(&self.name, self.dim, 2, 0.1, stream.named(&self.name))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, kinds: &[TokenKind]) -> Result<Var> {
        if kinds.is_empty() {
            return Err(Error::Invalid("type_embed needs at least one token".into()));
        }
        let table = tape.param(store, &self.name)?;
        let idx: Vec<usize> = kinds.iter().map(|k| k.index()).collect();
        tape.gather_cols(table, &idx)
    }
}

/// Multi-head self-attention with a residual connection and layer norm.
/// Tokens are columns, grouped position-major (see [`Tape::attention`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
}

impl SelfAttention {
    fn p(&self, s: &str) -> String {
        format!("{}.{s}", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore, stream: RngStream) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "{}: dimension {} not divisible by {} heads",
                self.name, self.dim, self.heads
            )));
        }
        for m in ["wq", "wk", "wv", "wo"] {
            store.insert_glorot(&self.p(m), self.dim, self.dim, stream.named(&self.p(m)))?;
        }
        store.insert(self.p("gain"), Tensor::filled(self.dim, 1, 1.0))?;
        store.insert(self.p("shift"), Tensor::zeros(self.dim, 1))?;
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, groups: usize) -> Result<Var> {
        let rows = tape.value(x).rows();
        if rows != self.dim {
            return Err(Error::shape(
                "self_attention",
                format!("{}: token dim {rows}, model dim {}", self.name, self.dim),
            ));
        }
        let proj = |tape: &mut Tape, m: &str| -> Result<Var> {
            let w = tape.param(store, &self.p(m))?;
            tape.matmul(w, x)
        };
        let q = proj(tape, "wq")?;
        let k = proj(tape, "wk")?;
        let v = proj(tape, "wv")?;
        let a = tape.attention(q, k, v, groups, self.heads)?;
        let wo = tape.param(store, &self.p("wo"))?;
        let o = tape.matmul(wo, a)?;
        let r = tape.add(x, o)?;
        let n = tape.layer_norm_cols(r)?;
        let g = tape.param(store, &self.p("gain"))?;
        let b = tape.param(store, &self.p("shift"))?;
        let n = tape.mul_col(n, g)?;
        tape.add_bias(n, b)
    }
}
