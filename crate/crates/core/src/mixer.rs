//! MLP-Mixer block with an attention module in front of each mixing MLP.
//!
//! ```text
//! Z'  = X  + W₂ σ(W₁ Attn_s(LN₁(X)))            token mixing, along n
//! Z'' = Z' + σ(Attn_c(LN₂(Z')ᵀ)ᵀ V₁ᵀ) V₂ᵀ        channel mixing, along d
//! ```
//!
//! `Attn_s` treats the `n` tokens as the sequence (width `d`); `Attn_c` runs
//! on the transposed matrix, so the `d` channels are the sequence (width `n`).
//! `σ` is the sigmoid-approximated GELU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_layer, AttentionNodes, AttentionParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{BoundParams, ModelParams};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub n: usize,
    pub d: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
}

/// `(token_hidden, channel_hidden)` pairs swept in the original experiments.
pub const PRESETS: [(usize, usize); 3] = [(64, 256), (128, 512), (256, 1024)];
pub const DEFAULT_PRESET: (usize, usize) = (128, 512);

impl MixerConfig {
    pub fn new(n: usize, d: usize, token_hidden: usize, channel_hidden: usize) -> Result<Self> {
        let c = Self {
            n,
            d,
            token_hidden,
            channel_hidden,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.token_hidden == 0 || self.channel_hidden == 0 {
            return Err(Error::invalid(format!("mixer dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerAttentionParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attn_s: AttentionParams,
    /// `token_hidden × n`
    pub w1: Tensor,
    /// `n × token_hidden`
    pub w2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub attn_c: AttentionParams,
    /// `channel_hidden × d`
    pub v1: Tensor,
    /// `d × channel_hidden`
    pub v2: Tensor,
}

fn fan_in_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Tensor> {
    Tensor::uniform(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng)
}

impl MixerAttentionParams {
    pub fn init<R: Rng + ?Sized>(c: &MixerConfig, rng: &mut R) -> Result<Self> {
        c.validate()?;
        Ok(Self {
            ln1_gamma: Tensor::full(&[c.d], 1.0)?,
            ln1_beta: Tensor::zeros(&[c.d])?,
            attn_s: AttentionParams::init(c.d, rng)?,
            w1: fan_in_uniform(c.token_hidden, c.n, rng)?,
            w2: fan_in_uniform(c.n, c.token_hidden, rng)?,
            ln2_gamma: Tensor::full(&[c.d], 1.0)?,
            ln2_beta: Tensor::zeros(&[c.d])?,
            attn_c: AttentionParams::init(c.n, rng)?,
            v1: fan_in_uniform(c.channel_hidden, c.d, rng)?,
            v2: fan_in_uniform(c.d, c.channel_hidden, rng)?,
        })
    }

    pub fn config(&self) -> MixerConfig {
        MixerConfig {
            n: self.w2.shape()[0],
            d: self.v2.shape()[0],
            token_hidden: self.w1.shape()[0],
            channel_hidden: self.v1.shape()[0],
        }
    }

    fn plain(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("token_mlp.w1", &self.w1),
            ("token_mlp.w2", &self.w2),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("channel_mlp.v1", &self.v1),
            ("channel_mlp.v2", &self.v2),
        ]
    }

    pub fn insert_into(&self, params: &mut ModelParams, prefix: &str) -> Result<()> {
        for (name, t) in self.plain() {
            params.insert(format!("{prefix}.{name}"), t.clone())?;
        }
        self.attn_s.insert_into(params, &format!("{prefix}.attn_s"))?;
        self.attn_c.insert_into(params, &format!("{prefix}.attn_c"))
    }

    pub fn from_named(params: &ModelParams, prefix: &str) -> Result<Self> {
        let get = |n: &str| params.get(&format!("{prefix}.{n}")).cloned();
        Ok(Self {
            ln1_gamma: get("ln1.gamma")?,
            ln1_beta: get("ln1.beta")?,
            attn_s: AttentionParams::from_named(params, &format!("{prefix}.attn_s"))?,
            w1: get("token_mlp.w1")?,
            w2: get("token_mlp.w2")?,
            ln2_gamma: get("ln2.gamma")?,
            ln2_beta: get("ln2.beta")?,
            attn_c: AttentionParams::from_named(params, &format!("{prefix}.attn_c"))?,
            v1: get("channel_mlp.v1")?,
            v2: get("channel_mlp.v2")?,
        })
    }

    pub fn to_named(&self, prefix: &str) -> Result<ModelParams> {
        let mut p = ModelParams::new();
        self.insert_into(&mut p, prefix)?;
        Ok(p)
    }

    /// Records all weights on `graph` as trainable leaves.
    pub fn bind(&self, graph: &mut Graph) -> Result<MixerNodes> {
        let bound = self.to_named("m")?.bind(graph, true);
        MixerNodes::lookup(&bound, "m")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MixerNodes {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub attn_s: AttentionNodes,
    pub w1: NodeId,
    pub w2: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub attn_c: AttentionNodes,
    pub v1: NodeId,
    pub v2: NodeId,
}

impl MixerNodes {
    pub fn lookup(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let get = |n: &str| bound.get(&format!("{prefix}.{n}"));
        Ok(Self {
            ln1_gamma: get("ln1.gamma")?,
            ln1_beta: get("ln1.beta")?,
            attn_s: AttentionNodes::lookup(bound, &format!("{prefix}.attn_s"))?,
            w1: get("token_mlp.w1")?,
            w2: get("token_mlp.w2")?,
            ln2_gamma: get("ln2.gamma")?,
            ln2_beta: get("ln2.beta")?,
            attn_c: AttentionNodes::lookup(bound, &format!("{prefix}.attn_c"))?,
            v1: get("channel_mlp.v1")?,
            v2: get("channel_mlp.v2")?,
        })
    }
}

/// `Z' = X + W₂ σ(W₁ Attn_s(LN₁(X)))`.
pub fn token_mixing_sublayer(graph: &mut Graph, x: NodeId, p: &MixerNodes) -> Result<NodeId> {
    let h = graph.layer_norm(x, p.ln1_gamma, p.ln1_beta, LAYER_NORM_EPS)?;
    let a = attention_layer(graph, h, &p.attn_s)?; // n×d
    // W₁·a mixes along the token axis; equivalent to transposing, applying
    // the MLP per channel, and transposing back.
    let u = graph.matmul(p.w1, a)?; // token_hidden×d
    let u = graph.gelu(u)?;
    let r = graph.matmul(p.w2, u)?; // n×d
    graph.add(x, r)
}

/// `Z'' = Z' + σ(Attn_c(LN₂(Z')ᵀ)ᵀ V₁ᵀ) V₂ᵀ`.
pub fn channel_mixing_sublayer(graph: &mut Graph, z: NodeId, p: &MixerNodes) -> Result<NodeId> {
    let h = graph.layer_norm(z, p.ln2_gamma, p.ln2_beta, LAYER_NORM_EPS)?;
    let ht = graph.transpose(h)?; // d×n
    let a = attention_layer(graph, ht, &p.attn_c)?;
    let a = graph.transpose(a)?; // n×d
    let u = graph.matmul_nt(a, p.v1)?; // n×channel_hidden
    let u = graph.gelu(u)?;
    let r = graph.matmul_nt(u, p.v2)?; // n×d
    graph.add(z, r)
}

pub fn mixer_attention_block(graph: &mut Graph, x: NodeId, p: &MixerNodes) -> Result<NodeId> {
    let z = token_mixing_sublayer(graph, x, p)?;
    channel_mixing_sublayer(graph, z, p)
}
