//! 2-D cross-correlation kernels (single image, `C×H×W`), grouped and strided.
//!
//! Regular convolutions go through im2col + GEMM; the depthwise case
//! (one input and one output channel per group) uses direct loops.

use crate::error::{Error, Result};
use crate::linalg::{gemm, gemm_new, MatRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so that `H' = ceil(H / stride)`; any odd remainder goes
    /// to the bottom/right edge.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl Conv2dOptions {
    pub fn same(stride: usize) -> Self {
        Self {
            stride,
            padding: Padding::Same,
            groups: 1,
        }
    }

    pub fn depthwise(stride: usize, channels: usize) -> Self {
        Self {
            stride,
            padding: Padding::Same,
            groups: channels,
        }
    }
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self::same(1)
    }
}

enum Columns {
    /// 1×1 stride-1 kernels read the input directly.
    Input,
    Single(Vec<f64>),
    PerGroup(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub groups: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output extent and leading pad for one spatial axis.
pub fn output_extent(size: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = size.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(size);
            Some((out, total / 2))
        }
        Padding::Valid => (size >= kernel).then(|| ((size - kernel) / stride + 1, 0)),
    }
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], opts: Conv2dOptions) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x_shape.to_vec(),
            rhs: w_shape.to_vec(),
        };
        let (&[c_in, h, w], &[c_out, cin_g, kh, kw]) = (x_shape, w_shape) else {
            return Err(mismatch());
        };
        let g = opts.groups;
        if g == 0 || opts.stride == 0 {
            return Err(Error::invalid("conv2d: stride and groups must be positive"));
        }
        if c_in % g != 0 || c_out % g != 0 || cin_g != c_in / g {
            return Err(mismatch());
        }
        let (h_out, pad_top) = output_extent(h, kh, opts.stride, opts.padding).ok_or_else(mismatch)?;
        let (w_out, pad_left) = output_extent(w, kw, opts.stride, opts.padding).ok_or_else(mismatch)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride: opts.stride,
            groups: g,
            pad_top,
            pad_left,
            h_out,
            w_out,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.h_out, self.w_out]
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn patch_len(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Output indices `lo..hi` whose tap `k` lands inside `0..size`.
    #[inline]
    fn valid_range(&self, k: usize, pad: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
        let hi = if size + pad > k { ((size + pad - k - 1) / s + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Writes the in-image taps of `group`; padding entries of `cols` are left untouched.
    fn im2col(&self, x: &[f64], group: usize, cols: &mut [f64]) {
        let (p, s) = (self.positions(), self.stride);
        let c0 = group * self.cin_g();
        for ci in 0..self.cin_g() {
            let plane = &x[(c0 + ci) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                let (y_lo, y_hi) = self.valid_range(ki, self.pad_top, self.h, self.h_out);
                for kj in 0..self.kw {
                    let (x_lo, x_hi) = self.valid_range(kj, self.pad_left, self.w, self.w_out);
                    let row = &mut cols[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    for oy in y_lo..y_hi {
                        let src = &plane[(oy * s + ki - self.pad_top) * self.w..][..self.w];
                        let dst = &mut row[oy * self.w_out..][..self.w_out];
                        if x_lo < x_hi {
                            let base = x_lo * s + kj - self.pad_left;
                            if s == 1 {
                                dst[x_lo..x_hi].copy_from_slice(&src[base..base + (x_hi - x_lo)]);
                            } else {
                                for (i, d) in dst[x_lo..x_hi].iter_mut().enumerate() {
                                    *d = src[base + i * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], group: usize, dx: &mut [f64]) {
        let (p, s) = (self.positions(), self.stride);
        let c0 = group * self.cin_g();
        for ci in 0..self.cin_g() {
            let plane = &mut dx[(c0 + ci) * self.h * self.w..][..self.h * self.w];
            for ki in 0..self.kh {
                let (y_lo, y_hi) = self.valid_range(ki, self.pad_top, self.h, self.h_out);
                for kj in 0..self.kw {
                    let (x_lo, x_hi) = self.valid_range(kj, self.pad_left, self.w, self.w_out);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let row = &cols[((ci * self.kh + ki) * self.kw + kj) * p..][..p];
                    let base = x_lo * s + kj - self.pad_left;
                    for oy in y_lo..y_hi {
                        let dst = &mut plane[(oy * s + ki - self.pad_top) * self.w..][..self.w];
                        let src = &row[oy * self.w_out + x_lo..oy * self.w_out + x_hi];
                        for (i, &v) in src.iter().enumerate() {
                            dst[base + i * s] += v;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], weight: &[f64]) -> Vec<f64> {
        if self.is_depthwise() {
            let mut out = vec![0.0; self.c_out * self.positions()];
            self.depthwise_forward(x, weight, &mut out);
            return out;
        }
        let (k, p, cout_g) = (self.patch_len(), self.positions(), self.cout_g());
        let cols = self.columns(x);
        let cols_g = |g: usize| -> &[f64] {
            match &cols {
                Columns::Input => &x[g * k * p..][..k * p],
                Columns::Single(c) => c,
                Columns::PerGroup(c) => &c[g * k * p..][..k * p],
            }
        };
        if self.groups == 1 {
            return gemm_new(MatRef::new(weight, cout_g, k), MatRef::new(cols_g(0), k, p));
        }
        let mut out = vec![0.0; self.c_out * p];
        for g in 0..self.groups {
            gemm(
                MatRef::new(&weight[g * cout_g * k..], cout_g, k),
                MatRef::new(cols_g(g), k, p),
                &mut out[g * cout_g * p..],
                false,
            );
        }
        out
    }

    /// The im2col matrices of all groups. Padding taps stay zero.
    fn columns(&self, x: &[f64]) -> Columns {
        let (k, p) = (self.patch_len(), self.positions());
        if self.is_pointwise() {
            Columns::Input
        } else if self.groups == 1 {
            let mut c = vec![0.0; k * p];
            self.im2col(x, 0, &mut c);
            Columns::Single(c)
        } else {
            let mut c = vec![0.0; self.groups * k * p];
            for g in 0..self.groups {
                self.im2col(x, g, &mut c[g * k * p..][..k * p]);
            }
            Columns::PerGroup(c)
        }
    }

    /// Returns `(d input, d weight)` for the upstream gradient `gout`,
    /// computing only the requested parts.
    pub fn backward(
        &self,
        x: &[f64],
        weight: &[f64],
        gout: &[f64],
        want_dx: bool,
        want_dw: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        if self.is_depthwise() {
            let mut dx = vec![0.0; self.c_in * self.h * self.w];
            let mut dw = vec![0.0; weight.len()];
            self.depthwise_backward(x, weight, gout, &mut dx, &mut dw);
            return (want_dx.then_some(dx), want_dw.then_some(dw));
        }
        let (k, p, cout_g) = (self.patch_len(), self.positions(), self.cout_g());
        let dw = want_dw.then(|| {
            let cols = self.columns(x);
            let cols_g = |g: usize| -> &[f64] {
                match &cols {
                    Columns::Input => &x[g * k * p..][..k * p],
                    Columns::Single(c) => c,
                    Columns::PerGroup(c) => &c[g * k * p..][..k * p],
                }
            };
            if self.groups == 1 {
                return gemm_new(MatRef::new(gout, cout_g, p), MatRef::new(cols_g(0), k, p).t());
            }
            let mut dw = vec![0.0; weight.len()];
            for g in 0..self.groups {
                gemm(
                    MatRef::new(&gout[g * cout_g * p..], cout_g, p),
                    MatRef::new(cols_g(g), k, p).t(),
                    &mut dw[g * cout_g * k..],
                    false,
                );
            }
            dw
        });
        let dx = want_dx.then(|| {
            if self.is_pointwise() && self.groups == 1 {
                return gemm_new(MatRef::new(weight, cout_g, k).t(), MatRef::new(gout, cout_g, p));
            }
            let mut dx = vec![0.0; self.c_in * self.h * self.w];
            for g in 0..self.groups {
                let dcols = gemm_new(
                    MatRef::new(&weight[g * cout_g * k..], cout_g, k).t(),
                    MatRef::new(&gout[g * cout_g * p..], cout_g, p),
                );
                if self.is_pointwise() {
                    dx[g * k * p..][..k * p].copy_from_slice(&dcols);
                } else {
                    self.col2im(&dcols, g, &mut dx);
                }
            }
            dx
        });
        (dx, dw)
    }

    fn depthwise_forward(&self, x: &[f64], weight: &[f64], out: &mut [f64]) {
        let (kh, kw, s) = (self.kh, self.kw, self.stride);
        for c in 0..self.c_out {
            let plane = &x[c * self.h * self.w..][..self.h * self.w];
            let wk = &weight[c * kh * kw..][..kh * kw];
            let dst = &mut out[c * self.positions()..][..self.positions()];
            for ki in 0..kh {
                let (y_lo, y_hi) = self.valid_range(ki, self.pad_top, self.h, self.h_out);
                for kj in 0..kw {
                    let (x_lo, x_hi) = self.valid_range(kj, self.pad_left, self.w, self.w_out);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let wv = wk[ki * kw + kj];
                    let base = x_lo * s + kj - self.pad_left;
                    for oy in y_lo..y_hi {
                        let src = &plane[(oy * s + ki - self.pad_top) * self.w..][..self.w];
                        let d = &mut dst[oy * self.w_out + x_lo..oy * self.w_out + x_hi];
                        for (i, o) in d.iter_mut().enumerate() {
                            *o += wv * src[base + i * s];
                        }
                    }
                }
            }
        }
    }

    fn depthwise_backward(&self, x: &[f64], weight: &[f64], gout: &[f64], dx: &mut [f64], dw: &mut [f64]) {
        let (kh, kw, s) = (self.kh, self.kw, self.stride);
        for c in 0..self.c_out {
            let plane = &x[c * self.h * self.w..][..self.h * self.w];
            let dplane = &mut dx[c * self.h * self.w..][..self.h * self.w];
            let wk = &weight[c * kh * kw..][..kh * kw];
            let dwk = &mut dw[c * kh * kw..][..kh * kw];
            let g = &gout[c * self.positions()..][..self.positions()];
            for ki in 0..kh {
                let (y_lo, y_hi) = self.valid_range(ki, self.pad_top, self.h, self.h_out);
                for kj in 0..kw {
                    let (x_lo, x_hi) = self.valid_range(kj, self.pad_left, self.w, self.w_out);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let wv = wk[ki * kw + kj];
                    let base = x_lo * s + kj - self.pad_left;
                    let mut acc = 0.0;
                    for oy in y_lo..y_hi {
                        let row = (oy * s + ki - self.pad_top) * self.w;
                        let gs = &g[oy * self.w_out + x_lo..oy * self.w_out + x_hi];
                        for (i, &go) in gs.iter().enumerate() {
                            acc += go * plane[row + base + i * s];
                            dplane[row + base + i * s] += go * wv;
                        }
                    }
                    dwk[ki * kw + kj] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        assert_eq!(output_extent(64, 3, 2, Padding::Same), Some((32, 0)));
        assert_eq!(output_extent(32, 3, 1, Padding::Same), Some((32, 1)));
        assert_eq!(output_extent(5, 3, 2, Padding::Same), Some((3, 1)));
        assert_eq!(output_extent(7, 1, 2, Padding::Same), Some((4, 0)));
        assert_eq!(output_extent(5, 3, 1, Padding::Valid), Some((3, 0)));
        assert_eq!(output_extent(2, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn group_mismatch_is_an_error() {
        let opts = Conv2dOptions {
            stride: 1,
            padding: Padding::Same,
            groups: 2,
        };
        assert!(ConvGeometry::new(&[3, 4, 4], &[2, 1, 3, 3], opts).is_err());
        assert!(ConvGeometry::new(&[4, 4, 4], &[2, 1, 3, 3], opts).is_err());
        assert!(ConvGeometry::new(&[4, 4, 4], &[2, 2, 3, 3], opts).is_ok());
    }
}
