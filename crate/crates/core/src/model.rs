//! The full classifier: stem → backbone stages → tokenizer → mixer-attention
//! block(s) → token average pool → linear head → softmax.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{fan_in_uniform, he_uniform, init_block, run_block, tokenize, BackboneConfig, BlockNodes};
use crate::conv::Conv2dOptions;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mixer::{mixer_attention_block, MixerAttentionParams, MixerConfig, MixerNodes, DEFAULT_PRESET};
use crate::params::{BoundParams, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub mixer_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            token_hidden: DEFAULT_PRESET.0,
            channel_hidden: DEFAULT_PRESET.1,
            mixer_depth: 1,
        }
    }
}

impl ModelConfig {
    pub fn mixer_config(&self) -> MixerConfig {
        MixerConfig {
            n: self.backbone.tokens(),
            d: self.backbone.d_model,
            token_hidden: self.token_hidden,
            channel_hidden: self.channel_hidden,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.backbone.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.mixer_config().validate()
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.backbone.input_size;
        if image.shape() != [1, s, s] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: vec![1, s, s],
                rhs: image.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Seeded initialization of every parameter named by `config`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    let bb = &config.backbone;
    p.insert("stem.conv.weight", he_uniform(&[bb.stem_channels, 1, 3, 3], 9, &mut rng)?)?;
    p.insert("stem.conv.bias", Tensor::zeros(&[bb.stem_channels])?)?;
    for (prefix, spec) in bb.named_blocks() {
        init_block(&spec, &prefix, &mut p, &mut rng)?;
    }
    let c = bb.feature_channels();
    p.insert("tokenizer.weight", fan_in_uniform(&[bb.d_model, c, 1, 1], c, &mut rng)?)?;
    p.insert("tokenizer.bias", Tensor::zeros(&[bb.d_model])?)?;
    let mc = config.mixer_config();
    for i in 0..config.mixer_depth {
        MixerAttentionParams::init(&mc, &mut rng)?.insert_into(&mut p, &format!("mixer.{i}"))?;
    }
    p.insert("head.weight", fan_in_uniform(&[bb.num_classes, bb.d_model], bb.d_model, &mut rng)?)?;
    p.insert("head.bias", Tensor::zeros(&[bb.num_classes])?)?;
    Ok(p)
}

/// Nodes of interest from one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardPass {
    /// Pre-softmax class scores, shape `[C]`.
    pub logits: NodeId,
    /// Softmax probabilities, shape `[C]`.
    pub probs: NodeId,
    /// Tokenizer 1×1-conv output, `d_model×H×W`.
    pub feature_map: NodeId,
    /// Mixer output, `n×d_model`.
    pub mixed: NodeId,
}

/// Records the forward pass for `image` (`1×S×S`) on `graph`.
pub fn forward_graph(graph: &mut Graph, bound: &BoundParams, config: &ModelConfig, image: NodeId) -> Result<ForwardPass> {
    config.check_image(graph.value(image))?;
    let x = graph.conv2d(image, bound.get("stem.conv.weight")?, Conv2dOptions::same(2))?;
    let x = graph.add_channel_bias(x, bound.get("stem.conv.bias")?)?;
    let mut x = graph.gelu(x)?;
    for (prefix, spec) in config.backbone.named_blocks() {
        let nodes = BlockNodes::lookup(bound, &prefix, spec.kind)?;
        x = run_block(graph, x, &nodes, &spec)?;
    }
    let t = tokenize(graph, x, bound.get("tokenizer.weight")?, Some(bound.get("tokenizer.bias")?))?;
    let mut z = t.tokens;
    for i in 0..config.mixer_depth {
        let nodes = MixerNodes::lookup(bound, &format!("mixer.{i}"))?;
        z = mixer_attention_block(graph, z, &nodes)?;
    }
    let pooled = graph.mean_rows(z)?; // 1×d
    let logits = graph.matmul_nt(pooled, bound.get("head.weight")?)?;
    let c = config.num_classes();
    let bias = graph.reshape(bound.get("head.bias")?, &[1, c])?;
    let logits = graph.add(logits, bias)?;
    let logits = graph.reshape(logits, &[c])?;
    let probs = graph.softmax(logits)?;
    Ok(ForwardPass {
        logits,
        probs,
        feature_map: t.feature_map,
        mixed: z,
    })
}

/// Class probabilities for one grayscale image.
pub fn model_forward(image: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<Tensor> {
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, false);
    let x = graph.constant(image.clone());
    let out = forward_graph(&mut graph, &bound, config, x)?;
    Ok(graph.value(out.probs).clone())
}

pub fn predict(image: &Tensor, params: &ModelParams, config: &ModelConfig) -> Result<usize> {
    let probs = model_forward(image, params, config)?;
    Ok(argmax(probs.data()))
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in v.iter().enumerate() {
        if a > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_follow_config() {
        let c = ModelConfig::default();
        let p = init_params(&c, 0).unwrap();
        assert!(p.contains("stem.conv.weight"));
        assert!(p.contains("stages.2.1.depthwise.weight"));
        assert!(!p.contains("stages.0.0.depthwise.weight"));
        assert!(p.contains("mixer.0.attn_c.wo"));
        assert_eq!(p.get("mixer.0.attn_c.wo").unwrap().shape(), &[64, 64]);
        assert_eq!(p.get("mixer.0.channel_mlp.v1").unwrap().shape(), &[512, 64]);
        let q = init_params(&c, 0).unwrap();
        assert_eq!(p, q);
        assert_ne!(p, init_params(&c, 1).unwrap());
    }

    #[test]
    fn wrong_input_size() {
        let c = ModelConfig::default();
        let p = init_params(&c, 0).unwrap();
        let img = Tensor::zeros(&[1, 32, 32]).unwrap();
        assert!(model_forward(&img, &p, &c).is_err());
    }
}
