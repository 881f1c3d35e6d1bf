//! Compact EfficientNetV2-style feature extractor: Fused-MBConv and MBConv
//! blocks with squeeze-and-excitation, plus the 1×1 tokenizer that turns the
//! final feature map into an `n×d_model` token matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{output_extent, Conv2dOptions, Padding};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{BoundParams, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    FusedMbconv,
    Mbconv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: BlockKind,
    pub repeat: usize,
    pub out_channels: usize,
    /// Stride of the first block; the rest use stride 1.
    pub stride: usize,
    pub expand_ratio: usize,
    pub se_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub d_model: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    /// 64×64 input, stride-2 stem, three stages down to an 8×8×64 map.
    fn default() -> Self {
        let stage = |kind, repeat, out_channels, stride, expand_ratio| StageConfig {
            kind,
            repeat,
            out_channels,
            stride,
            expand_ratio,
            se_ratio: 0.25,
        };
        Self {
            input_size: 64,
            stem_channels: 16,
            stages: vec![
                stage(BlockKind::FusedMbconv, 2, 16, 1, 1),
                stage(BlockKind::FusedMbconv, 2, 32, 2, 2),
                stage(BlockKind::Mbconv, 2, 64, 2, 4),
            ],
            d_model: 64,
            num_classes: 3,
        }
    }
}

/// Fully resolved geometry of one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub expand_ratio: usize,
    pub se_ratio: f64,
}

impl BlockSpec {
    pub fn expanded(&self) -> usize {
        self.in_channels * self.expand_ratio
    }

    pub fn se_channels(&self) -> usize {
        ((self.expanded() as f64 * self.se_ratio).floor() as usize).max(1)
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::invalid(format!("block stride must be 1 or 2, got {}", self.stride)));
        }
        if self.expand_ratio < 1 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("block channels and expand ratio must be at least 1"));
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return Err(Error::invalid(format!("se_ratio must lie in (0, 1], got {}", self.se_ratio)));
        }
        if (self.expanded() as f64) * self.se_ratio < 1.0 {
            return Err(Error::invalid("squeeze-and-excitation would reduce to zero channels"));
        }
        Ok(())
    }
}

impl BackboneConfig {
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut c = self.stem_channels;
        let mut out = Vec::new();
        for s in &self.stages {
            for b in 0..s.repeat {
                out.push(BlockSpec {
                    kind: s.kind,
                    in_channels: c,
                    out_channels: s.out_channels,
                    stride: if b == 0 { s.stride } else { 1 },
                    expand_ratio: s.expand_ratio,
                    se_ratio: s.se_ratio,
                });
                c = s.out_channels;
            }
        }
        out
    }

    /// Blocks paired with their parameter prefix `stages.<stage>.<block>`.
    pub fn named_blocks(&self) -> Vec<(String, BlockSpec)> {
        let mut names = Vec::new();
        for (si, s) in self.stages.iter().enumerate() {
            names.extend((0..s.repeat).map(|b| format!("stages.{si}.{b}")));
        }
        names.into_iter().zip(self.blocks()).collect()
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(self.stem_channels, |s| s.out_channels)
    }

    /// Spatial extent (square) of the final feature map.
    pub fn feature_size(&self) -> usize {
        let step = |h: usize, s: usize| output_extent(h, 3, s, Padding::Same).map_or(h, |(o, _)| o);
        let mut h = step(self.input_size, 2);
        for b in self.blocks() {
            h = step(h, b.stride);
        }
        h
    }

    pub fn tokens(&self) -> usize {
        self.feature_size() * self.feature_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.stem_channels == 0 || self.d_model == 0 || self.num_classes == 0 {
            return Err(Error::invalid("backbone sizes must be positive"));
        }
        for s in &self.stages {
            if s.repeat == 0 {
                return Err(Error::invalid("stage repeat must be at least 1"));
            }
        }
        self.blocks().iter().try_for_each(BlockSpec::validate)
    }
}

/// Uniform init with bound `√(6 / fan_in)` (convs followed by an activation).
pub(crate) fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Uniform init with bound `1 / √fan_in`.
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Adds the parameters of one block under `prefix`.
pub fn init_block<R: Rng + ?Sized>(spec: &BlockSpec, prefix: &str, params: &mut ModelParams, rng: &mut R) -> Result<()> {
    spec.validate()?;
    let (cin, ce, cse, cout) = (spec.in_channels, spec.expanded(), spec.se_channels(), spec.out_channels);
    let mut put = |name: &str, t: Tensor| params.insert(format!("{prefix}.{name}"), t);
    match spec.kind {
        BlockKind::FusedMbconv => {
            put("expand.weight", he_uniform(&[ce, cin, 3, 3], cin * 9, rng)?)?;
        }
        BlockKind::Mbconv => {
            put("expand.weight", he_uniform(&[ce, cin, 1, 1], cin, rng)?)?;
            put("depthwise.weight", he_uniform(&[ce, 1, 3, 3], 9, rng)?)?;
            put("depthwise.bias", Tensor::zeros(&[ce])?)?;
        }
    }
    put("expand.bias", Tensor::zeros(&[ce])?)?;
    put("se.reduce", fan_in_uniform(&[cse, ce], ce, rng)?)?;
    put("se.expand", fan_in_uniform(&[ce, cse], cse, rng)?)?;
    put("project.weight", fan_in_uniform(&[cout, ce, 1, 1], ce, rng)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct SeNodes {
    /// `C_se × C`
    pub reduce: NodeId,
    /// `C × C_se`
    pub expand: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub expand_w: NodeId,
    pub expand_b: NodeId,
    pub depthwise: Option<(NodeId, NodeId)>,
    pub se: SeNodes,
    pub project_w: NodeId,
}

impl BlockNodes {
    pub fn lookup(bound: &BoundParams, prefix: &str, kind: BlockKind) -> Result<Self> {
        let get = |n: &str| bound.get(&format!("{prefix}.{n}"));
        Ok(Self {
            expand_w: get("expand.weight")?,
            expand_b: get("expand.bias")?,
            depthwise: match kind {
                BlockKind::Mbconv => Some((get("depthwise.weight")?, get("depthwise.bias")?)),
                BlockKind::FusedMbconv => None,
            },
            se: SeNodes {
                reduce: get("se.reduce")?,
                expand: get("se.expand")?,
            },
            project_w: get("project.weight")?,
        })
    }
}

/// `x · sigmoid(W₂ relu(W₁ gap(x)))`, channelwise.
pub fn se_module(graph: &mut Graph, x: NodeId, p: &SeNodes) -> Result<NodeId> {
    let s = graph.spatial_mean(x)?; // C×1
    let z = graph.matmul(p.reduce, s)?;
    let z = graph.relu(z)?;
    let e = graph.matmul(p.expand, z)?;
    let gate = graph.sigmoid(e)?;
    graph.scale_channels(x, gate)
}

fn conv_bias(graph: &mut Graph, x: NodeId, w: NodeId, b: NodeId, opts: Conv2dOptions) -> Result<NodeId> {
    let y = graph.conv2d(x, w, opts)?;
    graph.add_channel_bias(y, b)
}

fn project(graph: &mut Graph, x: NodeId, h: NodeId, p: &BlockNodes, spec: &BlockSpec) -> Result<NodeId> {
    let y = graph.conv2d(h, p.project_w, Conv2dOptions::same(1))?;
    if spec.has_residual() {
        graph.add(x, y)
    } else {
        Ok(y)
    }
}

/// 3×3 conv (expand, stride) → σ → SE → 1×1 project (+ residual).
pub fn fused_mbconv(graph: &mut Graph, x: NodeId, p: &BlockNodes, spec: &BlockSpec) -> Result<NodeId> {
    let h = conv_bias(graph, x, p.expand_w, p.expand_b, Conv2dOptions::same(spec.stride))?;
    let h = graph.gelu(h)?;
    let h = se_module(graph, h, &p.se)?;
    project(graph, x, h, p, spec)
}

/// 1×1 expand → σ → 3×3 depthwise (stride) → σ → SE → 1×1 project (+ residual).
pub fn mbconv(graph: &mut Graph, x: NodeId, p: &BlockNodes, spec: &BlockSpec) -> Result<NodeId> {
    let (dw, db) = p
        .depthwise
        .ok_or_else(|| Error::invalid("mbconv block is missing its depthwise weights"))?;
    let h = conv_bias(graph, x, p.expand_w, p.expand_b, Conv2dOptions::same(1))?;
    let h = graph.gelu(h)?;
    let h = conv_bias(graph, h, dw, db, Conv2dOptions::depthwise(spec.stride, spec.expanded()))?;
    let h = graph.gelu(h)?;
    let h = se_module(graph, h, &p.se)?;
    project(graph, x, h, p, spec)
}

pub fn run_block(graph: &mut Graph, x: NodeId, p: &BlockNodes, spec: &BlockSpec) -> Result<NodeId> {
    match spec.kind {
        BlockKind::FusedMbconv => fused_mbconv(graph, x, p, spec),
        BlockKind::Mbconv => mbconv(graph, x, p, spec),
    }
}

/// Output of [`tokenize`].
#[derive(Debug, Clone, Copy)]
pub struct Tokens {
    /// `d_model×H×W` output of the 1×1 projection.
    pub feature_map: NodeId,
    /// `n×d_model` with `n = H·W`; row `i` is spatial position `(i / W, i % W)`.
    pub tokens: NodeId,
}

pub fn tokenize(graph: &mut Graph, features: NodeId, w_proj: NodeId, bias: Option<NodeId>) -> Result<Tokens> {
    let mut a = graph.conv2d(features, w_proj, Conv2dOptions::same(1))?;
    if let Some(b) = bias {
        a = graph.add_channel_bias(a, b)?;
    }
    let (d, h, w) = graph.value(a).dims3("tokenize")?;
    let flat = graph.reshape(a, &[d, h * w])?;
    let tokens = graph.transpose(flat)?;
    Ok(Tokens {
        feature_map: a,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let c = BackboneConfig::default();
        c.validate().unwrap();
        assert_eq!(c.blocks().len(), 6);
        assert_eq!(c.feature_size(), 8);
        assert_eq!(c.tokens(), 64);
        assert_eq!(c.feature_channels(), 64);
        let b = c.blocks();
        assert!(b[0].has_residual() && b[1].has_residual());
        assert!(!b[2].has_residual() && b[3].has_residual());
        assert!(!b[4].has_residual() && b[5].has_residual());
        assert_eq!(b[4].expanded(), 128);
        assert_eq!(b[4].se_channels(), 32);
    }

    #[test]
    fn invalid_blocks() {
        let mut c = BackboneConfig::default();
        c.stages[0].stride = 3;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::default();
        c.stages[1].se_ratio = 0.0;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::default();
        c.stages[2].expand_ratio = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mbconv_expand_ratio_one_keeps_width() {
        let spec = BlockSpec {
            kind: BlockKind::Mbconv,
            in_channels: 6,
            out_channels: 6,
            stride: 1,
            expand_ratio: 1,
            se_ratio: 0.5,
        };
        let mut p = ModelParams::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        init_block(&spec, "b", &mut p, &mut rng).unwrap();
        assert_eq!(p.get("b.expand.weight").unwrap().shape(), &[6, 6, 1, 1]);
        assert_eq!(p.get("b.depthwise.weight").unwrap().shape(), &[6, 1, 3, 3]);
        assert_eq!(p.get("b.se.reduce").unwrap().shape(), &[3, 6]);
    }
}
