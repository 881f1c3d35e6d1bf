//! Kernelized linear attention with the `elu(x) + 1` feature map.
//!
//! For queries `Q`, keys `K` and values `V` (all `n×d`):
//!
//! ```text
//! out = φ(Q) (φ(K)ᵀ V) / φ(Q) (φ(K)ᵀ 1)
//! ```
//!
//! The `d×d` summary `φ(K)ᵀV` and the `d`-vector `φ(K)ᵀ1` are formed first,
//! so the cost is `O(n·d²)` and no `n×n` weight matrix is ever built.
//! [`dense_attention_oracle`] evaluates the same quantity (or standard softmax
//! attention) the quadratic way.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{BoundParams, ModelParams};
use crate::tensor::Tensor;

/// Lower clamp on the per-query normalizer. `φ > 0` so the true value is
/// never zero; this only matters if products underflow.
pub const NORMALIZER_FLOOR: f64 = 1e-9;

/// Projection weights of a single attention head, `X·W` convention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

const NAMES: [&str; 4] = ["wq", "wk", "wv", "wo"];

impl AttentionParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Result<Self> {
        let d = wq.shape().first().copied().unwrap_or(0);
        for w in [&wq, &wk, &wv, &wo] {
            if w.shape() != [d, d] {
                return Err(Error::ShapeMismatch {
                    op: "attention params",
                    lhs: vec![d, d],
                    rhs: w.shape().to_vec(),
                });
            }
            if !w.is_finite() {
                return Err(Error::invalid("attention weights must be finite"));
            }
        }
        Ok(Self { wq, wk, wv, wo })
    }

    /// `uniform(-1/√d, 1/√d)` for all four matrices.
    pub fn init<R: Rng + ?Sized>(d_model: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut w = || Tensor::uniform(&[d_model, d_model], bound, rng);
        Self::new(w()?, w()?, w()?, w()?)
    }

    pub fn identity(d_model: usize) -> Result<Self> {
        let i = Tensor::eye(d_model)?;
        Self::new(i.clone(), i.clone(), i.clone(), i)
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    pub fn insert_into(&self, params: &mut ModelParams, prefix: &str) -> Result<()> {
        for (name, t) in NAMES.iter().zip(self.tensors()) {
            params.insert(format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn from_named(params: &ModelParams, prefix: &str) -> Result<Self> {
        let get = |n: &str| params.get(&format!("{prefix}.{n}")).cloned();
        Self::new(get("wq")?, get("wk")?, get("wv")?, get("wo")?)
    }

    /// Records the weights on `graph` as trainable leaves.
    pub fn bind(&self, graph: &mut Graph) -> AttentionNodes {
        let [wq, wk, wv, wo] = self.tensors().map(|t| graph.param(t.clone()));
        AttentionNodes { wq, wk, wv, wo }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
}

impl AttentionNodes {
    pub fn lookup(bound: &BoundParams, prefix: &str) -> Result<Self> {
        let get = |n: &str| bound.get(&format!("{prefix}.{n}"));
        Ok(Self {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
            wo: get("wo")?,
        })
    }
}

/// Positive feature map `φ(x) = elu(x) + 1`.
pub fn phi(graph: &mut Graph, x: NodeId) -> Result<NodeId> {
    let e = graph.elu(x)?;
    graph.add_scalar(e, 1.0)
}

pub fn phi_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    let (n, d) = q.dims2("attention")?;
    let bad = |t: &Tensor| Error::ShapeMismatch {
        op: "attention",
        lhs: q.shape().to_vec(),
        rhs: t.shape().to_vec(),
    };
    if k.shape() != q.shape() {
        return Err(bad(k));
    }
    if v.dims2("attention")?.0 != n {
        return Err(bad(v));
    }
    Ok((n, d))
}

/// Linear attention over `n×d` queries/keys and `n×d_v` values.
pub fn linear_attention(graph: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let (n, _) = check_qkv(graph.value(q), graph.value(k), graph.value(v))?;
    if n == 1 {
        // The lone weight normalizes to exactly 1, so the output is `V` and
        // does not depend on `Q` or `K`. Returning it directly keeps that
        // identity exact instead of exact-up-to-rounding.
        return Ok(v);
    }
    let fq = phi(graph, q)?;
    let fk = phi(graph, k)?;
    let kv = graph.matmul_tn(fk, v)?; // d×d_v
    let ksum = graph.sum_rows(fk)?; // 1×d
    let num = graph.matmul(fq, kv)?; // n×d_v
    let den = graph.matmul_nt(fq, ksum)?; // n×1
    let den = graph.clamp_min(den, NORMALIZER_FLOOR)?;
    graph.div_rows(num, den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    /// `⟨φ(q), φ(k)⟩` weights, row-normalized.
    Phi,
    /// `exp(q·k / √d)` weights, row-normalized.
    Softmax,
}

/// Quadratic reference: builds the full `n×n` weight matrix, normalizes each
/// row, and multiplies by `V`.
pub fn dense_attention_oracle(q: &Tensor, k: &Tensor, v: &Tensor, kernel: Kernel) -> Result<Tensor> {
    let (n, d) = check_qkv(q, k, v)?;
    let dv = v.shape()[1];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut weights = vec![0.0; n * n];
    match kernel {
        Kernel::Phi => {
            let fq: Vec<f64> = qd.iter().map(|&a| phi_scalar(a)).collect();
            let fk: Vec<f64> = kd.iter().map(|&a| phi_scalar(a)).collect();
            for i in 0..n {
                for j in 0..n {
                    weights[i * n + j] = (0..d).map(|c| fq[i * d + c] * fk[j * d + c]).sum();
                }
            }
        }
        Kernel::Softmax => {
            let scale = 1.0 / (d as f64).sqrt();
            for i in 0..n {
                let row = &mut weights[i * n..(i + 1) * n];
                for (j, w) in row.iter_mut().enumerate() {
                    *w = scale * (0..d).map(|c| qd[i * d + c] * kd[j * d + c]).sum::<f64>();
                }
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|w| *w = (*w - m).exp());
            }
        }
    }
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let row = &weights[i * n..(i + 1) * n];
        let mut z: f64 = row.iter().sum();
        if kernel == Kernel::Phi {
            z = z.max(NORMALIZER_FLOOR);
        }
        let o = &mut out[i * dv..(i + 1) * dv];
        for (j, &w) in row.iter().enumerate() {
            for c in 0..dv {
                o[c] += w * vd[j * dv + c];
            }
        }
        o.iter_mut().for_each(|a| *a /= z);
    }
    Tensor::new(&[n, dv], out)
}

/// Single-head projected attention: `linear_attention(XWq, XWk, XWv)·Wo`.
pub fn attention_layer(graph: &mut Graph, x: NodeId, p: &AttentionNodes) -> Result<NodeId> {
    let q = graph.matmul(x, p.wq)?;
    let k = graph.matmul(x, p.wk)?;
    let v = graph.matmul(x, p.wv)?;
    let a = linear_attention(graph, q, k, v)?;
    graph.matmul(a, p.wo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub linear_us: f64,
    pub quadratic_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub linear_slope: f64,
    pub quadratic_slope: f64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,linear_us,quadratic_us\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.3},{:.3}\n", r.n, r.linear_us, r.quadratic_us));
        }
        s.push_str(&format!(
            "# slopes: linear={:.4} quadratic={:.4}\n",
            self.linear_slope, self.quadratic_slope
        ));
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub const MIN_BENCH_LENGTHS: usize = 4;

/// Times linear attention against dense softmax attention for each length.
/// Runs on the calling thread.
pub fn bench_attention(lengths: &[usize], d: usize, repeats: usize, seed: u64) -> Result<BenchReport> {
    if lengths.len() < MIN_BENCH_LENGTHS {
        return Err(Error::invalid("bench needs at least 4 sequence lengths for a stable slope fit"));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(Error::invalid("bench lengths must be positive and strictly ascending"));
    }
    if d == 0 || repeats == 0 {
        return Err(Error::invalid("bench needs d >= 1 and repeats >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let mut gen = || Tensor::uniform(&[n, d], 1.0, &mut rng);
        let (q, k, v) = (gen()?, gen()?, gen()?);
        let mut lin = Vec::with_capacity(repeats);
        let mut quad = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            let mut g = Graph::new();
            let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let out = linear_attention(&mut g, qn, kn, vn)?;
            std::hint::black_box(g.value(out));
            lin.push(t.elapsed().as_secs_f64() * 1e6);

            let t = Instant::now();
            let out = dense_attention_oracle(&q, &k, &v, Kernel::Softmax)?;
            std::hint::black_box(&out);
            quad.push(t.elapsed().as_secs_f64() * 1e6);
        }
        rows.push(BenchRow {
            n,
            linear_us: median(lin),
            quadratic_us: median(quad),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let lin: Vec<f64> = rows.iter().map(|r| r.linear_us).collect();
    let quad: Vec<f64> = rows.iter().map(|r| r.quadratic_us).collect();
    Ok(BenchReport {
        linear_slope: log_log_slope(&xs, &lin),
        quadratic_slope: log_log_slope(&xs, &quad),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn run_linear(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = linear_attention(&mut g, a, b, c).unwrap();
        g.value(o).clone()
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi_scalar(0.0), 1.0);
        assert_eq!(phi_scalar(2.0), 3.0);
        assert!((phi_scalar(-1.0) - 0.367_879_441_171_442_3).abs() < 1e-15);
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0., 2., -1.]));
        let y = phi(&mut g, x).unwrap();
        assert_eq!(g.value(y).data()[..2], [1.0, 3.0]);
        assert!((g.value(y).data()[2] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn single_token_returns_value() {
        let q = t(&[1, 3], &[0.3, -2.0, 5.0]);
        let k = t(&[1, 3], &[-0.7, 1.5, 0.0]);
        let v = t(&[1, 3], &[4.0, -1.25, 9.5]);
        let out = run_linear(&q, &k, &v);
        assert_eq!(out, v);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = t(&[2, 2], &[0.1, 0.2, -1.0, 3.0]);
        let k = t(&[2, 2], &[0.5, -0.5, 0.5, -0.5]);
        let v = t(&[2, 2], &[1.0, 2.0, 3.0, 6.0]);
        let out = run_linear(&q, &k, &v);
        for row in out.data().chunks(2) {
            assert!((row[0] - 2.0).abs() < 1e-14 && (row[1] - 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_oracle_trivial_cases() {
        let q = t(&[1, 2], &[1.0, 2.0]);
        let v = t(&[1, 2], &[7.0, -3.0]);
        assert_eq!(dense_attention_oracle(&q, &q, &v, Kernel::Softmax).unwrap(), v);
        // All-zero queries give equal logits for every key.
        let q = Tensor::zeros(&[3, 2]).unwrap();
        let k = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let v = t(&[3, 2], &[1., 0., 2., 3., 6., 0.]);
        let out = dense_attention_oracle(&q, &k, &v, Kernel::Softmax).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-14 && (row[1] - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let q = Tensor::zeros(&[3, 2]).unwrap();
        let k = Tensor::zeros(&[2, 2]).unwrap();
        assert!(dense_attention_oracle(&q, &k, &q, Kernel::Phi).is_err());
        let mut g = Graph::new();
        let (a, b) = (g.constant(q), g.constant(k));
        assert!(linear_attention(&mut g, a, b, a).is_err());
    }

    #[test]
    fn layer_identity_and_zero_values() {
        let x = t(&[1, 3], &[0.5, -1.0, 2.0]);
        let mut g = Graph::new();
        let p = AttentionParams::identity(3).unwrap().bind(&mut g);
        let xn = g.constant(x.clone());
        let out = attention_layer(&mut g, xn, &p).unwrap();
        assert!(g.value(out).max_abs_diff(&x).unwrap() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = AttentionParams::init(3, &mut rng).unwrap();
        params.wv = Tensor::zeros(&[3, 3]).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let xn = g.constant(Tensor::uniform(&[4, 3], 2.0, &mut rng).unwrap());
        let out = attention_layer(&mut g, xn, &p).unwrap();
        assert!(g.value(out).data().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn layer_width_mismatch() {
        let mut g = Graph::new();
        let p = AttentionParams::identity(3).unwrap().bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 4]).unwrap());
        assert!(attention_layer(&mut g, x, &p).is_err());
    }

    #[test]
    fn bench_argument_checks() {
        assert!(bench_attention(&[8, 8, 8, 8], 4, 1, 0).is_err());
        assert!(bench_attention(&[8, 16, 32], 4, 1, 0).is_err());
        let r = bench_attention(&[8, 16, 32, 64], 4, 1, 0).unwrap();
        assert_eq!(r.rows.len(), 4);
        let csv = r.to_csv();
        assert!(csv.starts_with("n,linear_us,quadratic_us\n"));
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().last().unwrap().starts_with("# slopes: linear="));
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((log_log_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }
}
