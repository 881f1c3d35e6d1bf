//! Central finite-difference checks of tape gradients, and the suite that
//! runs them over every differentiable building block.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_layer, AttentionNodes, AttentionParams};
use crate::backbone::{init_block, mbconv, fused_mbconv, se_module, BackboneConfig, BlockKind, BlockNodes, BlockSpec, SeNodes};
use crate::conv::Conv2dOptions;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::mixer::{channel_mixing_sublayer, token_mixing_sublayer, MixerAttentionParams, MixerConfig, MixerNodes};
use crate::model::{forward_graph, init_params, ModelConfig};
use crate::params::{BoundParams, ModelParams};
use crate::tensor::Tensor;
use crate::train::cross_entropy;

/// Default finite-difference step.
pub const STEP: f64 = 1e-5;
/// Pass threshold for the suite.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

fn evaluate<F>(f: &F, params: &ModelParams) -> Result<f64>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, false);
    let out = f(&mut graph, &bound)?;
    let v = graph.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients of the scalar `f` against central differences
/// over the listed `(name, flat index)` entries.
pub fn grad_check_entries<F>(f: F, params: &ModelParams, h: f64, entries: &[(String, usize)]) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<NodeId>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, true);
    let out = f(&mut graph, &bound)?;
    graph.backward(out)?;
    let analytic = bound.gradients(&graph);

    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (name, k) in entries {
        let base = params.get(name)?.data()[*k];
        probe.get_mut(name)?.data_mut()[*k] = base + h;
        let plus = evaluate(&f, &probe)?;
        probe.get_mut(name)?.data_mut()[*k] = base - h;
        let minus = evaluate(&f, &probe)?;
        probe.get_mut(name)?.data_mut()[*k] = base;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.get(name)?.data()[*k];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.checked += 1;
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((name.clone(), *k));
        }
    }
    Ok(report)
}

/// Checks every entry of every parameter.
pub fn grad_check<F>(f: F, params: &ModelParams, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<NodeId>,
{
    let entries: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.numel()).map(move |k| (name.to_string(), k)))
        .collect();
    grad_check_entries(f, params, h, &entries)
}

/// Checks a seeded random `fraction` of each parameter's entries (at least
/// one per tensor).
pub fn grad_check_sampled<F>(f: F, params: &ModelParams, h: f64, fraction: f64, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<NodeId>,
{
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid("sample fraction must lie in (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (name, t) in params.iter() {
        let n = t.numel();
        let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let mut picked = sample(&mut rng, n, take).into_vec();
        picked.sort_unstable();
        entries.extend(picked.into_iter().map(|k| (name.to_string(), k)));
    }
    grad_check_entries(f, params, h, &entries)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters with a
/// distinct weight.
pub fn weighted_sum(graph: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = Tensor::uniform(graph.value(out).shape(), 1.0, &mut rng)?;
    let r = graph.constant(r);
    let p = graph.mul(out, r)?;
    graph.sum(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub seconds: f64,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_params(shapes: &[(&str, &[usize])], bound: f64, rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    let mut p = ModelParams::new();
    for (name, shape) in shapes {
        p.insert(*name, Tensor::uniform(shape, bound, rng)?)?;
    }
    Ok(p)
}

type Case = fn(u64) -> Result<GradCheck>;

fn case_matmul(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rand_params(&[("a", &[3, 4]), ("b", &[4, 5]), ("c", &[5, 4])], 1.0, &mut rng)?;
    grad_check(
        |g, b| {
            let ab = g.matmul(b.get("a")?, b.get("b")?)?; // 3×5
            let t = g.matmul_nt(ab, b.get("b")?)?; // 3×4
            let u = g.matmul_tn(b.get("a")?, t)?; // 4×4
            let ct = g.transpose(b.get("c")?)?;
            let v = g.matmul(u, ct)?; // 4×5
            weighted_sum(g, v, seed)
        },
        &p,
        STEP,
    )
}

fn case_elementwise(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = rand_params(&[("x", &[3, 4]), ("y", &[3, 4]), ("den", &[3, 1])], 1.5, &mut rng)?;
    // Keep the ln input and the denominators away from zero.
    for v in p.get_mut("den")?.data_mut() {
        *v = 1.0 + v.abs();
    }
    grad_check(
        |g, b| {
            let (x, y) = (b.get("x")?, b.get("y")?);
            let mut terms = vec![g.relu(x)?, g.elu(x)?, g.sigmoid(x)?, g.exp(y)?, g.gelu(x)?];
            let sq = g.mul(x, x)?;
            let pos = g.add_scalar(sq, 0.5)?;
            terms.push(g.ln(pos)?);
            terms.push(g.sub(x, y)?);
            terms.push(g.scale(y, -0.7)?);
            terms.push(g.clamp_min(x, 0.1)?);
            terms.push(g.div_rows(x, b.get("den")?)?);
            let mut acc = g.mul(x, y)?;
            for t in terms {
                acc = g.add(acc, t)?;
            }
            let tr = g.transpose(acc)?;
            let r = g.reshape(tr, &[2, 6])?;
            let s = g.sum_rows(r)?;
            let m = g.mean_rows(acc)?;
            let s = weighted_sum(g, s, seed)?;
            let m = weighted_sum(g, m, seed + 1)?;
            let e = g.select(acc, 5)?;
            let sm = g.add(s, m)?;
            g.add(sm, e)
        },
        &p,
        STEP,
    )
}

fn case_layer_norm(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rand_params(&[("x", &[3, 5]), ("gamma", &[5]), ("beta", &[5])], 1.0, &mut rng)?;
    grad_check(
        |g, b| {
            let y = g.layer_norm(b.get("x")?, b.get("gamma")?, b.get("beta")?, 1e-5)?;
            weighted_sum(g, y, seed)
        },
        &p,
        STEP,
    )
}

fn case_softmax(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rand_params(&[("x", &[2, 4])], 2.0, &mut rng)?;
    grad_check(
        |g, b| {
            let y = g.softmax(b.get("x")?)?;
            weighted_sum(g, y, seed)
        },
        &p,
        STEP,
    )
}

fn case_conv2d(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rand_params(
        &[("x", &[2, 7, 6]), ("w", &[3, 2, 3, 3]), ("w1", &[2, 3, 1, 1]), ("wg", &[4, 1, 3, 3]), ("bias", &[4])],
        1.0,
        &mut rng,
    )?;
    grad_check(
        |g, b| {
            let y = g.conv2d(b.get("x")?, b.get("w")?, Conv2dOptions::same(2))?; // 3×4×3
            let valid = Conv2dOptions {
                padding: crate::conv::Padding::Valid,
                ..Conv2dOptions::default()
            };
            let z = g.conv2d(b.get("x")?, b.get("w")?, valid)?; // 3×5×4
            let u = g.conv2d(y, b.get("w1")?, Conv2dOptions::same(1))?; // 2×4×3
            let grouped = Conv2dOptions {
                groups: 2,
                ..Conv2dOptions::same(1)
            };
            let v = g.conv2d(u, b.get("wg")?, grouped)?; // 4×4×3
            let v = g.add_channel_bias(v, b.get("bias")?)?;
            let a = weighted_sum(g, z, seed)?;
            let c = weighted_sum(g, v, seed + 1)?;
            g.add(a, c)
        },
        &p,
        STEP,
    )
}

fn case_depthwise(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rand_params(&[("x", &[4, 5, 6]), ("w", &[4, 1, 3, 3])], 1.0, &mut rng)?;
    grad_check(
        |g, b| {
            let y1 = g.conv2d(b.get("x")?, b.get("w")?, Conv2dOptions::depthwise(1, 4))?;
            let y2 = g.conv2d(b.get("x")?, b.get("w")?, Conv2dOptions::depthwise(2, 4))?;
            let a = weighted_sum(g, y1, seed)?;
            let c = weighted_sum(g, y2, seed + 1)?;
            g.add(a, c)
        },
        &p,
        STEP,
    )
}

fn case_se(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rand_params(&[("x", &[4, 3, 3]), ("reduce", &[2, 4]), ("expand", &[4, 2])], 1.0, &mut rng)?;
    grad_check(
        |g, b| {
            let se = SeNodes {
                reduce: b.get("reduce")?,
                expand: b.get("expand")?,
            };
            let y = se_module(g, b.get("x")?, &se)?;
            weighted_sum(g, y, seed)
        },
        &p,
        STEP,
    )
}

fn block_case(kind: BlockKind, stride: usize, seed: u64) -> Result<GradCheck> {
    let spec = BlockSpec {
        kind,
        in_channels: 4,
        out_channels: if stride == 1 { 4 } else { 6 },
        stride,
        expand_ratio: 2,
        se_ratio: 0.25,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    init_block(&spec, "blk", &mut p, &mut rng)?;
    p.insert("x", Tensor::uniform(&[4, 5, 5], 1.0, &mut rng)?)?;
    grad_check(
        |g, b| {
            let nodes = BlockNodes::lookup(b, "blk", kind)?;
            let y = match kind {
                BlockKind::FusedMbconv => fused_mbconv(g, b.get("x")?, &nodes, &spec)?,
                BlockKind::Mbconv => mbconv(g, b.get("x")?, &nodes, &spec)?,
            };
            weighted_sum(g, y, seed)
        },
        &p,
        STEP,
    )
}

fn worse(a: GradCheck, b: GradCheck) -> GradCheck {
    let checked = a.checked + b.checked;
    let mut w = if b.max_rel_error > a.max_rel_error { b } else { a };
    w.checked = checked;
    w
}

fn case_fused_mbconv(seed: u64) -> Result<GradCheck> {
    Ok(worse(
        block_case(BlockKind::FusedMbconv, 1, seed)?,
        block_case(BlockKind::FusedMbconv, 2, seed)?,
    ))
}

fn case_mbconv(seed: u64) -> Result<GradCheck> {
    Ok(worse(block_case(BlockKind::Mbconv, 1, seed)?, block_case(BlockKind::Mbconv, 2, seed)?))
}

fn case_attention(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::new();
    AttentionParams::init(4, &mut rng)?.insert_into(&mut p, "attn")?;
    p.insert("x", Tensor::uniform(&[5, 4], 1.5, &mut rng)?)?;
    grad_check(
        |g, b| {
            let nodes = AttentionNodes::lookup(b, "attn")?;
            let y = attention_layer(g, b.get("x")?, &nodes)?;
            weighted_sum(g, y, seed)
        },
        &p,
        STEP,
    )
}

fn mixer_params(seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MixerConfig::new(4, 6, 5, 7)?;
    let mut p = MixerAttentionParams::init(&cfg, &mut rng)?.to_named("mix")?;
    // Nonzero norms so the LN affine terms matter.
    for name in ["mix.ln1.beta", "mix.ln2.beta"] {
        for v in p.get_mut(name)?.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    p.insert("x", Tensor::uniform(&[4, 6], 1.0, &mut rng)?)?;
    Ok(p)
}

fn case_token_mixing(seed: u64) -> Result<GradCheck> {
    let p = mixer_params(seed)?;
    grad_check(
        |g, b| {
            let nodes = MixerNodes::lookup(b, "mix")?;
            let y = token_mixing_sublayer(g, b.get("x")?, &nodes)?;
            weighted_sum(g, y, seed)
        },
        &p,
        STEP,
    )
}

fn case_channel_mixing(seed: u64) -> Result<GradCheck> {
    let p = mixer_params(seed)?;
    grad_check(
        |g, b| {
            let nodes = MixerNodes::lookup(b, "mix")?;
            let y = channel_mixing_sublayer(g, b.get("x")?, &nodes)?;
            weighted_sum(g, y, seed)
        },
        &p,
        STEP,
    )
}

fn case_cross_entropy(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = rand_params(&[("logits", &[3])], 3.0, &mut rng)?;
    let label = rng.gen_range(0..3);
    grad_check(
        |g, b| {
            let probs = g.softmax(b.get("logits")?)?;
            cross_entropy(g, probs, label)
        },
        &p,
        STEP,
    )
}

/// Default architecture at `32×32`, checking `log p_c` on 1% of the weights.
fn case_full_model(seed: u64) -> Result<GradCheck> {
    let config = ModelConfig {
        backbone: BackboneConfig {
            input_size: 32,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut p = init_params(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::uniform(&[1, 32, 32], 0.5, &mut rng)?.data().iter().map(|v| v + 0.5).collect();
    p.insert("image", Tensor::new(&[1, 32, 32], image)?)?;
    let class = rng.gen_range(0..config.num_classes());
    grad_check_sampled(
        |g, b| {
            let out = forward_graph(g, b, &config, b.get("image")?)?;
            let pc = g.select(out.probs, class)?;
            g.ln(pc)
        },
        &p,
        STEP,
        0.01,
        seed,
    )
}

pub const SUITE: [(&str, Case); 14] = [
    ("matmul", case_matmul),
    ("elementwise", case_elementwise),
    ("layer_norm", case_layer_norm),
    ("softmax", case_softmax),
    ("conv2d", case_conv2d),
    ("depthwise_conv", case_depthwise),
    ("squeeze_excitation", case_se),
    ("fused_mbconv", case_fused_mbconv),
    ("mbconv", case_mbconv),
    ("attention_layer", case_attention),
    ("token_mixing", case_token_mixing),
    ("channel_mixing", case_channel_mixing),
    ("cross_entropy", case_cross_entropy),
    ("full_model", case_full_model),
];

/// Runs every case for each seed and keeps the worst error per case.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<SuiteEntry>> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    let mut out = Vec::new();
    for (name, case) in SUITE {
        let start = Instant::now();
        let mut entry = SuiteEntry {
            name,
            max_rel_error: 0.0,
            checked: 0,
            seconds: 0.0,
        };
        for &seed in seeds {
            let r = case(seed)?;
            entry.max_rel_error = entry.max_rel_error.max(r.max_rel_error);
            entry.checked += r.checked;
        }
        entry.seconds = start.elapsed().as_secs_f64();
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap()).unwrap();
        let r = grad_check(|g, b| weighted_sum(g, b.get("x")?, 1), &p, STEP).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn square_matches_closed_form() {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let r = grad_check(
            |g, b| {
                let x = b.get("x")?;
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &p,
            STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::zeros(&[2]).unwrap()).unwrap();
        let err = grad_check(|_, b| b.get("x"), &p, STEP).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn sampled_check_takes_at_least_one_per_tensor() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::zeros(&[10]).unwrap()).unwrap();
        p.insert("b", Tensor::zeros(&[1]).unwrap()).unwrap();
        let r = grad_check_sampled(|g, b| g.sum(b.get("a")?), &p, STEP, 0.2, 3).unwrap();
        assert_eq!(r.checked, 3);
    }
}
