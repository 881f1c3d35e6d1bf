//! Naive reference implementations, written without the tape, used as
//! oracles by the integration tests.
#![allow(dead_code)]

use mixfire::attention::AttentionParams;
use mixfire::backbone::BackboneConfig;
use mixfire::eval::FoldSplit;
use mixfire::model::forward_graph;
use mixfire::mixer::MixerAttentionParams;
use mixfire::{Graph, ModelConfig, ModelParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed)).unwrap()
}

/// Row-major `rows×cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor) -> Self {
        assert_eq!(t.rank(), 2);
        Mat {
            rows: t.shape()[0],
            cols: t.shape()[1],
            v: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.rows, self.cols], self.v.clone()).unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.cols + j]
    }

    pub fn t(&self) -> Mat {
        let mut v = vec![0.0; self.v.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                v[j * self.rows + i] = self.at(i, j);
            }
        }
        Mat {
            rows: self.cols,
            cols: self.rows,
            v,
        }
    }

    pub fn mul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut v = vec![0.0; self.rows * b.cols];
        for i in 0..self.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.at(i, k) * b.at(k, j);
                }
                v[i * b.cols + j] = s;
            }
        }
        Mat {
            rows: self.rows,
            cols: b.cols,
            v,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            v: self.v.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    pub fn add(&self, b: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (b.rows, b.cols));
        Mat {
            v: self.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
            ..*self
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

pub fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let mut v = Vec::with_capacity(x.v.len());
    for r in 0..x.rows {
        let row = &x.v[r * x.cols..(r + 1) * x.cols];
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / x.cols as f64;
        for (j, a) in row.iter().enumerate() {
            v.push(gamma[j] * (a - mean) / (var + eps).sqrt() + beta[j]);
        }
    }
    Mat { v, ..*x }
}

/// Row-normalized `⟨φ(q_i), φ(k_j)⟩` weights applied to `V`.
pub fn phi_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let n = q.rows;
    let mut out = vec![0.0; n * v.cols];
    for i in 0..n {
        let w: Vec<f64> = (0..k.rows)
            .map(|j| (0..q.cols).map(|c| phi(q.at(i, c)) * phi(k.at(j, c))).sum())
            .collect();
        let total: f64 = w.iter().sum();
        for c in 0..v.cols {
            out[i * v.cols + c] = (0..k.rows).map(|j| w[j] * v.at(j, c)).sum::<f64>() / total;
        }
    }
    Mat {
        rows: n,
        cols: v.cols,
        v: out,
    }
}

pub fn attention_layer(x: &Mat, p: &AttentionParams) -> Mat {
    let m = |t: &Tensor| Mat::from_tensor(t);
    let a = phi_attention(&x.mul(&m(&p.wq)), &x.mul(&m(&p.wk)), &x.mul(&m(&p.wv)));
    a.mul(&m(&p.wo))
}

pub fn token_mixing(x: &Mat, p: &MixerAttentionParams) -> Mat {
    let h = layer_norm(x, p.ln1_gamma.data(), p.ln1_beta.data(), 1e-5);
    let a = attention_layer(&h, &p.attn_s);
    // Transpose, MLP along tokens, transpose back.
    let at = a.t(); // d×n
    let u = at.mul(&Mat::from_tensor(&p.w1).t()).map(gelu); // d×th
    let r = u.mul(&Mat::from_tensor(&p.w2).t()); // d×n
    x.add(&r.t())
}

pub fn channel_mixing(z: &Mat, p: &MixerAttentionParams) -> Mat {
    let h = layer_norm(z, p.ln2_gamma.data(), p.ln2_beta.data(), 1e-5);
    let a = attention_layer(&h.t(), &p.attn_c).t(); // n×d
    let u = a.mul(&Mat::from_tensor(&p.v1).t()).map(gelu);
    z.add(&u.mul(&Mat::from_tensor(&p.v2).t()))
}

/// `(out, pad_before)` for TF-style same padding.
pub fn same_extent(size: usize, k: usize, s: usize) -> (usize, usize) {
    let out = size.div_ceil(s);
    let total = ((out - 1) * s + k).saturating_sub(size);
    (out, total / 2)
}

/// Direct nested-loop grouped cross-correlation. `same` selects same vs
/// valid padding.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, same: bool, groups: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, cg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cg * groups, c);
    let ((oh, ph), (ow, pw)) = if same {
        (same_extent(h, kh, stride), same_extent(wd, kw, stride))
    } else {
        (((h - kh) / stride + 1, 0), ((wd - kw) / stride + 1, 0))
    };
    let og = o / groups;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        let g = oc / og;
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for ic in 0..cg {
                    for a in 0..kh {
                        for b in 0..kw {
                            let y = (i * stride + a) as isize - ph as isize;
                            let xx = (j * stride + b) as isize - pw as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            let xv = x.data()[((g * cg + ic) * h + y as usize) * wd + xx as usize];
                            s += xv * w.data()[((oc * cg + ic) * kh + a) * kw + b];
                        }
                    }
                }
                out[(oc * oh + i) * ow + j] = s;
            }
        }
    }
    Tensor::new(&[o, oh, ow], out).unwrap()
}

pub fn add_bias(x: &Tensor, b: &Tensor) -> Tensor {
    let hw = x.numel() / b.numel();
    let v = x.data().iter().enumerate().map(|(i, &a)| a + b.data()[i / hw]).collect();
    Tensor::new(x.shape(), v).unwrap()
}

pub fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&a| f(a)).collect()).unwrap()
}

pub fn add(x: &Tensor, y: &Tensor) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect()).unwrap()
}

/// `x · sigmoid(expand · relu(reduce · gap(x)))`
pub fn se(x: &Tensor, reduce: &Tensor, expand: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let hw = x.numel() / c;
    let gap = Mat {
        rows: c,
        cols: 1,
        v: (0..c).map(|k| x.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect(),
    };
    let z = Mat::from_tensor(reduce).mul(&gap).map(|v| v.max(0.0));
    let gate = Mat::from_tensor(expand).mul(&z).map(sigmoid);
    let v = x.data().iter().enumerate().map(|(i, &a)| a * gate.v[i / hw]).collect();
    Tensor::new(x.shape(), v).unwrap()
}

/// Exact nonnegative rational.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio(pub u128, pub u128);

pub fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Ratio {
    pub fn new(n: u128, d: u128) -> Self {
        let g = gcd(n, d).max(1);
        Ratio(n / g, d / g)
    }

    pub fn add(self, o: Ratio) -> Ratio {
        Ratio::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

pub struct MetricsOracle {
    pub accuracy: Ratio,
    pub precision: Vec<Option<Ratio>>,
    pub recall: Vec<Option<Ratio>>,
    pub macro_p: Ratio,
    pub macro_r: Ratio,
}

/// One-vs-rest counting straight from the matrix definition.
pub fn metrics_oracle(counts: &[Vec<u64>]) -> MetricsOracle {
    let c = counts.len();
    let total: u64 = counts.iter().flatten().sum();
    let trace: u64 = (0..c).map(|i| counts[i][i]).sum();
    let (mut precision, mut recall) = (vec![], vec![]);
    for k in 0..c {
        let tp = counts[k][k];
        let fp: u64 = (0..c).filter(|&t| t != k).map(|t| counts[t][k]).sum();
        let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| counts[k][p]).sum();
        precision.push((tp + fp > 0).then(|| Ratio::new(tp as u128, (tp + fp) as u128)));
        recall.push((tp + fn_ > 0).then(|| Ratio::new(tp as u128, (tp + fn_) as u128)));
    }
    let sum = |v: &[Option<Ratio>]| {
        v.iter().fold(Ratio(0, 1), |acc, r| acc.add(r.unwrap_or(Ratio(0, 1))))
    };
    let macro_p = sum(&precision);
    let macro_r = sum(&recall);
    MetricsOracle {
        accuracy: Ratio::new(trace as u128, total as u128),
        precision,
        recall,
        macro_p: Ratio::new(macro_p.0, macro_p.1 * c as u128),
        macro_r: Ratio::new(macro_r.0, macro_r.1 * c as u128),
    }
}

/// Panics unless `split` is a balanced partition of `0..n` into `k` test
/// folds with complementary train sets, stratified when `labels` is given.
pub fn check_partition(split: &FoldSplit, n: usize, k: usize, labels: Option<&[usize]>) {
    assert_eq!(split.folds.len(), k);
    let mut seen = vec![0u8; n];
    for fold in &split.folds {
        assert!(!fold.test.is_empty());
        let mut in_test = vec![false; n];
        for &i in &fold.test {
            seen[i] += 1;
            in_test[i] = true;
        }
        let complement: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
        assert_eq!(fold.train, complement);
    }
    assert!(seen.iter().all(|&s| s == 1), "test folds must partition 0..n");
    let sizes: Vec<usize> = split.folds.iter().map(|f| f.test.len()).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    if let Some(labels) = labels {
        let classes = labels.iter().max().unwrap() + 1;
        for c in 0..classes {
            let per_fold: Vec<usize> = split
                .folds
                .iter()
                .map(|f| f.test.iter().filter(|&&i| labels[i] == c).count())
                .collect();
            assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1, "class {c}: {per_fold:?}");
        }
    }
}

/// Stem, tokenizer and head only: `y^c = mean_tokens(A) · w_c + b_c`.
pub fn toy_config(d_model: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: 16,
            stem_channels: 3,
            stages: vec![],
            d_model,
            num_classes: 3,
        },
        token_hidden: 4,
        channel_hidden: 4,
        mixer_depth: 0,
    }
}

pub fn toy_image(seed: u64) -> Tensor {
    map(&rand_tensor(&[1, 16, 16], seed), f64::abs)
}

/// Tokenizer output for `image`.
pub fn feature_maps(params: &ModelParams, config: &ModelConfig, image: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let out = forward_graph(&mut g, &bound, config, x).unwrap();
    g.value(out.feature_map).clone()
}
