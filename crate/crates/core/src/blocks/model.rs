use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tape, Var};
use crate::blocks::embed::{positional_embed, SelfAttention, TokenKind, TypeEmbedding};
use crate::blocks::encoders::{Decoder, Encoder, ImageEncoder};
use crate::blocks::mlp::{Noise, SnnSpec};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sim::render::{Modality, PROPRIO_DIM};
use crate::sim::STATE_DIM;
use crate::tensor::Tensor;

/// How the attention-gain mask is applied to the scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    /// Masked logits are pushed to −1e9, so their weights are exactly zero.
    #[default]
    Exclusion,
    /// Scores are multiplied by the 0/1 mask before the softmax.
    Hadamard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub ensemble: usize,
    pub history: usize,
    /// Token width inside the transition transformer.
    pub width: usize,
    pub heads: usize,
    pub attn_layers: usize,
    pub token_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    pub action_dim: usize,
    pub image_size: usize,
    pub conv: [usize; 2],
    pub image_hidden: Vec<usize>,
    pub proprio_hidden: Vec<usize>,
    pub lift_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub max_len: usize,
    pub gain_mode: GainMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::small()
    }
}

impl ModelConfig {
    /// Module sizes of the reference architecture (latent width 256).
    pub fn reference() -> Self {
        ModelConfig {
            latent_dim: 256,
            ensemble: 32,
            history: 8,
            width: 256,
            heads: 8,
            attn_layers: 3,
            token_hidden: vec![256, 256],
            head_hidden: vec![256, 256],
            dropout: 0.1,
            action_dim: 40,
            image_size: 32,
            conv: [16, 32],
            image_hidden: vec![2048, 2048, 512],
            proprio_hidden: vec![128, 256, 512],
            lift_hidden: vec![128, 256, 512, 1024],
            decoder_hidden: vec![256, 128, 32],
            max_len: 64,
            gain_mode: GainMode::Exclusion,
        }
    }

    /// Desk-scale preset used by tests and the smoke run.
    pub fn small() -> Self {
        ModelConfig {
            latent_dim: 32,
            ensemble: 16,
            history: 8,
            width: 32,
            heads: 4,
            attn_layers: 2,
            token_hidden: vec![32],
            head_hidden: vec![32],
            dropout: 0.1,
            action_dim: 40,
            image_size: 32,
            conv: [8, 16],
            image_hidden: vec![64],
            proprio_hidden: vec![64, 64],
            lift_hidden: vec![64, 64],
            decoder_hidden: vec![64, 32],
            max_len: 64,
            gain_mode: GainMode::Exclusion,
        }
    }

    /// Tiny preset for finite-difference checks.
    pub fn tiny(latent_dim: usize, ensemble: usize) -> Self {
        ModelConfig {
            latent_dim,
            ensemble,
            history: 2,
            width: 8,
            heads: 2,
            attn_layers: 1,
            token_hidden: vec![8],
            head_hidden: vec![8],
            image_size: 8,
            conv: [2, 2],
            image_hidden: vec![8],
            proprio_hidden: vec![8],
            lift_hidden: vec![8],
            decoder_hidden: vec![8],
            max_len: 16,
            ..ModelConfig::small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble < 2 || !self.ensemble.is_multiple_of(2) {
            return Err(Error::Invalid(format!("ensemble size {} must be even and at least 2", self.ensemble)));
        }
        if self.history == 0 || self.history >= self.max_len {
            return Err(Error::Invalid(format!("history {} must be in [1, max_len)", self.history)));
        }
        if !self.width.is_multiple_of(2) || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!("width {} incompatible with {} heads", self.width, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// All learnable pieces of the attention-gain filter.
#[derive(Debug, Clone, PartialEq)]
pub struct AmdfModel {
    pub cfg: ModelConfig,
    pub state_embed: SnnSpec,
    pub action_embed: SnnSpec,
    pub types: TypeEmbedding,
    pub attn: Vec<SelfAttention>,
    pub head: SnnSpec,
    pub encoders: [Encoder; 3],
    pub decoder: Decoder,
    pub lift: SnnSpec,
}

pub const QUERY: &str = "ag.q";

fn widths(hidden: &[usize], out: usize) -> Vec<usize> {
    let mut w = hidden.to_vec();
    w.push(out);
    w
}

impl AmdfModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (dx, w, p) = (cfg.latent_dim, cfg.width, cfg.dropout);
        let px = cfg.image_size;
        let encoders = [
            Encoder::Image(ImageEncoder::new("enc.rgb", 3, px, cfg.conv, &cfg.image_hidden, dx, p)?),
            Encoder::Image(ImageEncoder::new("enc.depth", 1, px, cfg.conv, &cfg.image_hidden, dx, p)?),
            Encoder::Vector(SnnSpec::relu("enc.proprio", PROPRIO_DIM, &widths(&cfg.proprio_hidden, dx), p)),
        ];
        Ok(AmdfModel {
            state_embed: SnnSpec::relu("f.state", dx, &widths(&cfg.token_hidden, w), p),
            action_embed: SnnSpec::relu("f.action", cfg.action_dim, &widths(&cfg.token_hidden, w), p),
            types: TypeEmbedding {
                name: "f.type".into(),
                dim: w,
            },
            attn: (0..cfg.attn_layers)
                .map(|k| SelfAttention {
                    name: format!("f.attn{k}"),
                    dim: w,
                    heads: cfg.heads,
                })
                .collect(),
            head: SnnSpec::relu("f.head", w, &widths(&cfg.head_hidden, dx), p),
            encoders,
            decoder: Decoder::new("dec", dx, &cfg.decoder_hidden),
            lift: SnnSpec::relu("lift", STATE_DIM, &widths(&cfg.lift_hidden, dx), p),
            cfg,
        })
    }

    pub fn init(&self, seed: u64) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let s = RngStream(seed).named("init");
        self.state_embed.init(&mut store, s)?;
        self.action_embed.init(&mut store, s)?;
        self.types.init(&mut store, s)?;
        for a in &self.attn {
            a.init(&mut store, s)?;
        }
        self.head.init(&mut store, s)?;
        for e in &self.encoders {
            e.init(&mut store, s)?;
        }
        self.decoder.init(&mut store, s)?;
        self.lift.init(&mut store, s)?;
        store.insert_normal(QUERY, self.cfg.latent_dim, self.cfg.ensemble, 0.1, s.named(QUERY))?;
        Ok(store)
    }

    pub fn encoder(&self, m: Modality) -> &Encoder {
        &self.encoders[m.index()]
    }

    /// Stochastic transformer transition. `history` holds the last `L ≤ N`
    /// latent ensembles (`d_x × E` each, oldest first); member `g` draws all
    /// its dropout masks from `members[g]`. The output is the last history
    /// entry plus the decoded action-token update.
    pub fn transition(&self, tape: &mut Tape, store: &ParameterStore, history: &[Var], action: &Tensor, members: &[RngStream]) -> Result<Var> {
        let last = *history.last().ok_or_else(|| Error::Invalid("empty filter history".into()))?;
        let (len, e, n) = (history.len(), members.len(), self.cfg.history);
        if len > n {
            return Err(Error::Invalid(format!("history of {len} exceeds window {n}")));
        }
        if action.rows() != self.cfg.action_dim || action.cols() != 1 {
            return Err(Error::shape(
                "transition",
                format!("action {:?}, expected {}x1", action.shape(), self.cfg.action_dim),
            ));
        }
        let token_streams: Vec<RngStream> = (0..len)
            .flat_map(|p| members.iter().map(move |s| s.named("state").child(p as u64)))
            .collect();
        let states = tape.concat_cols(history)?;
        let states = self.state_embed.forward(tape, store, states, Noise::Columns(&token_streams))?;
        let act_streams: Vec<RngStream> = members.iter().map(|s| s.named("action")).collect();
        let a = tape.input(action.clone())?;
        let a = tape.broadcast_cols(a, e)?;
        let a = self.action_embed.forward(tape, store, a, Noise::Columns(&act_streams))?;
        let tokens = tape.concat_cols(&[states, a])?;

        let positions: Vec<usize> = (0..=len)
            .flat_map(|p| std::iter::repeat_n(if p == len { n } else { n - len + p }, e))
            .collect();
        let pe = tape.constant(positional_embed(&positions, self.cfg.width, self.cfg.max_len)?)?;
        let kinds: Vec<TokenKind> = (0..=len)
            .flat_map(|p| std::iter::repeat_n(if p == len { TokenKind::Action } else { TokenKind::State }, e))
            .collect();
        let ty = self.types.forward(tape, store, &kinds)?;
        let mut h = tape.add(tokens, pe)?;
        h = tape.add(h, ty)?;
        for block in &self.attn {
            h = block.forward(tape, store, h, e)?;
        }
        let out = tape.slice_cols(h, len * e, e)?;
        let head_streams: Vec<RngStream> = members.iter().map(|s| s.named("head")).collect();
        let delta = self.head.forward(tape, store, out, Noise::Columns(&head_streams))?;
        tape.add(last, delta)
    }

    /// Lift a ground-truth pose into an ensemble of `members.len()` latent samples.
    pub fn lift_state(&self, tape: &mut Tape, store: &ParameterStore, pose: &[f64], members: &[RngStream]) -> Result<Var> {
        if pose.len() != STATE_DIM {
            return Err(Error::shape("auxiliary_lift", format!("pose of length {}", pose.len())));
        }
        let x = tape.input(Tensor::column(pose.to_vec()))?;
        let x = tape.broadcast_cols(x, members.len())?;
        self.lift.forward(tape, store, x, Noise::Columns(members))
    }

    /// One lifted ensemble per history pose, oldest first.
    pub fn auxiliary_lift(&self, tape: &mut Tape, store: &ParameterStore, poses: &[[f64; STATE_DIM]], stream: RngStream) -> Result<Vec<Var>> {
        if poses.is_empty() {
            return Err(Error::Invalid("auxiliary_lift needs at least one state".into()));
        }
        poses
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let members = crate::blocks::column_streams(stream.child(k as u64), self.cfg.ensemble);
                self.lift_state(tape, store, p, &members)
            })
            .collect()
    }
}
