//! Grad-CAM saliency over the tokenizer's feature maps.
//!
//! For class `c` with logit `y^c` and feature maps `A^k` (`H×W`):
//!
//! ```text
//! a_k = (1/Z) Σ_ij ∂y^c/∂A^k_ij        Z = H·W
//! map = relu(Σ_k a_k A^k)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::imageio::write_pgm;
use crate::model::{forward_graph, ModelConfig};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Parameter path of the layer whose output the maps are taken from.
pub const FEATURE_LAYER: &str = "tokenizer";

#[derive(Debug, Clone, PartialEq)]
pub struct GradCamMap {
    /// `H×W`, nonnegative.
    pub values: Tensor,
    pub target_class: usize,
    pub feature_layer: String,
}

impl GradCamMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// `(row, col)` of the peak, see [`argmax_2d`].
    pub fn argmax(&self) -> (usize, usize) {
        argmax_2d(&self.values)
    }
}

/// `(row, col)` of the maximum of an `H×W` tensor. When several pixels tie
/// (as whole blocks do after [`upsample_nearest`]), returns the tied pixel
/// closest to their centroid, so a block reports its middle rather than its
/// top-left corner. Remaining ties go to the first in row-major order.
pub fn argmax_2d(t: &Tensor) -> (usize, usize) {
    let w = t.shape()[1];
    let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..t.numel()).filter(|&i| t.data()[i] == max).collect();
    if tied.is_empty() {
        // Only NaN entries.
        return (0, 0);
    }
    let n = tied.len() as f64;
    let cr = tied.iter().map(|&i| (i / w) as f64).sum::<f64>() / n;
    let cc = tied.iter().map(|&i| (i % w) as f64).sum::<f64>() / n;
    let dist = |i: usize| ((i / w) as f64 - cr).powi(2) + ((i % w) as f64 - cc).powi(2);
    let mut best = tied[0];
    for &i in &tied[1..] {
        if dist(i) < dist(best) {
            best = i;
        }
    }
    (best / w, best % w)
}

/// Combines `d×H×W` activations with their gradients into the map.
pub fn combine(activations: &Tensor, gradients: &Tensor) -> Result<Tensor> {
    let (d, h, w) = activations.dims3("gradcam")?;
    if gradients.shape() != activations.shape() {
        return Err(Error::ShapeMismatch {
            op: "gradcam",
            lhs: activations.shape().to_vec(),
            rhs: gradients.shape().to_vec(),
        });
    }
    let z = h * w;
    let mut map = vec![0.0; z];
    for k in 0..d {
        let g = &gradients.data()[k * z..(k + 1) * z];
        let a = &activations.data()[k * z..(k + 1) * z];
        let weight = g.iter().sum::<f64>() / z as f64;
        for (m, &v) in map.iter_mut().zip(a) {
            *m += weight * v;
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    Tensor::new(&[h, w], map)
}

/// Grad-CAM of `target_class` for one `1×S×S` image.
pub fn gradcam(params: &ModelParams, config: &ModelConfig, image: &Tensor, target_class: usize) -> Result<GradCamMap> {
    let classes = config.num_classes();
    if target_class >= classes {
        return Err(Error::ClassOutOfRange {
            index: target_class,
            classes,
        });
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph, false);
    // Marking the image as a parameter puts every activation on the
    // gradient path while the weights stay constants.
    let x = graph.param(image.clone());
    let out = forward_graph(&mut graph, &bound, config, x)?;
    let y = graph.select(out.logits, target_class)?;
    graph.backward(y)?;
    let a = graph.value(out.feature_map).clone();
    let g = match graph.grad(out.feature_map) {
        Some(g) => g,
        None => Tensor::zeros(a.shape())?,
    };
    Ok(GradCamMap {
        values: combine(&a, &g)?,
        target_class,
        feature_layer: FEATURE_LAYER.to_string(),
    })
}

/// Nearest-neighbour enlargement, `src = floor(dst · from / to)` per axis.
pub fn upsample_nearest(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w) = map.dims2("upsample")?;
    if height < h || width < w {
        return Err(Error::invalid(format!(
            "cannot upsample a {h}×{w} map to the smaller {height}×{width}"
        )));
    }
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        let si = i * h / height;
        for j in 0..width {
            out.push(map.data()[si * w + j * w / width]);
        }
    }
    Tensor::new(&[height, width], out)
}

/// Min-max normalization to `0..=255`. A constant map becomes all zeros.
pub fn normalize_to_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Writes `values` (`H×W`) as an 8-bit PGM after min-max normalization.
pub fn export_heatmap(values: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = values.dims2("export_heatmap")?;
    write_pgm(path, w, h, &normalize_to_bytes(values.data()))
}

/// [`export_heatmap`] plus a `<path>.txt` side-car holding
/// `class=<c> min=<v> max=<v>`.
pub fn export_heatmap_with_sidecar(values: &Tensor, target_class: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    export_heatmap(values, path)?;
    let lo = values.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    fs::write(&side, format!("class={target_class} min={lo} max={hi}\n")).map_err(|e| Error::io(side, e))
}
