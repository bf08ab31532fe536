//! Differentiable network layers, recorded on the autodiff [`Tape`].
//!
//! Image tensors are `[C, H, W]` row-major. Convolutions use zero "same"
//! padding: with stride `s` the output spatial size is `ceil(in/s)`, and the
//! padding splits as `(k-1)/2` before, `k/2` after. Transposed convolution
//! (`deconv2d`) is defined as the exact adjoint of the strided convolution
//! with the same kernel tensor, so `<conv(x), y> == <x, deconv(y)>` holds to
//! rounding error; its kernel layout is `[C_in, C_out, kh, kw]`.

use serde::{Deserialize, Serialize};

use crate::tensor::{axpy, dot, Node, Op, Tape, TensorRef};
use crate::{Error, Result};

/// Layer kinds appearing in network architecture descriptions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv,
    Deconv,
    MaxPool,
    BatchNorm,
    Dense,
    LeakyRelu,
    Sigmoid,
}

/// Declarative description of one layer; networks are built from a list of
/// these, and the list is what the checkpoint format digests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// (kh, kw) for conv/deconv; None elsewhere.
    pub kernel: Option<(usize, usize)>,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Negative-side slope, leaky ReLU only.
    pub slope: Option<f64>,
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        LayerSpec { kind: LayerKind::Conv, kernel: Some((k, k)), stride, in_channels, out_channels, slope: None }
    }

    pub fn deconv(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        LayerSpec { kind: LayerKind::Deconv, kernel: Some((k, k)), stride, in_channels, out_channels, slope: None }
    }

    pub fn maxpool() -> Self {
        LayerSpec { kind: LayerKind::MaxPool, kernel: Some((2, 2)), stride: 2, in_channels: 0, out_channels: 0, slope: None }
    }

    pub fn batchnorm(channels: usize) -> Self {
        LayerSpec { kind: LayerKind::BatchNorm, kernel: None, stride: 1, in_channels: channels, out_channels: channels, slope: None }
    }

    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec { kind: LayerKind::Dense, kernel: None, stride: 1, in_channels: inputs, out_channels: outputs, slope: None }
    }

    pub fn leaky_relu(slope: f64) -> Self {
        LayerSpec { kind: LayerKind::LeakyRelu, kernel: None, stride: 1, in_channels: 0, out_channels: 0, slope: Some(slope) }
    }

    pub fn sigmoid() -> Self {
        LayerSpec { kind: LayerKind::Sigmoid, kernel: None, stride: 1, in_channels: 0, out_channels: 0, slope: None }
    }
}

/// `ceil(n / s)` output positions for same-padded stride-`s` layers.
fn out_len(n: usize, s: usize) -> usize {
    (n + s - 1) / s
}

impl Tape {
    /// 2-D cross-correlation with zero "same" padding.
    /// `x: [C_in, H, W]`, `kernels: [C_out, C_in, kh, kw]`, optional
    /// `bias: [C_out]`; output `[C_out, ceil(H/stride), ceil(W/stride)]`.
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        kernels: TensorRef,
        bias: Option<TensorRef>,
        stride: usize,
    ) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::ShapeMismatch { op: "conv2d", detail: format!("input {xs:?}, kernels {ks:?}") });
        }
        if xs[0] != ks[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {} channels, kernels expect {}", xs[0], ks[1]),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias {:?} for {} output channels", self.shape(b), ks[0]),
                });
            }
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        let bias_v = bias.map(|b| self.values(b).to_vec());
        let values = conv_forward(
            self.values(x), ci, h, w,
            self.values(kernels), co, kh, kw,
            bias_v.as_deref(), stride,
        );
        let shape = vec![co, out_len(h, stride), out_len(w, stride)];
        let requires_grad =
            self.requires(x) || self.requires(kernels) || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(Node { op: Op::Conv2d { x, k: kernels, bias, stride }, shape, values, requires_grad, grad: None }))
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] at the same
    /// stride. `x: [C_in, H, W]`, `kernels: [C_in, C_out, kh, kw]`; output
    /// `[C_out, stride*H, stride*W]`.
    pub fn deconv2d(&mut self, x: TensorRef, kernels: TensorRef, stride: usize) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::ShapeMismatch { op: "deconv2d", detail: format!("input {xs:?}, kernels {ks:?}") });
        }
        if xs[0] != ks[0] {
            return Err(Error::ShapeMismatch {
                op: "deconv2d",
                detail: format!("input has {} channels, kernels expect {}", xs[0], ks[0]),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("deconv2d: stride must be positive".into()));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ks[1], ks[2], ks[3]);
        let values = deconv_forward(self.values(x), ci, h, w, self.values(kernels), co, kh, kw, stride);
        let shape = vec![co, stride * h, stride * w];
        let requires_grad = self.requires(x) || self.requires(kernels);
        Ok(self.push(Node { op: Op::Deconv2d { x, k: kernels, stride }, shape, values, requires_grad, grad: None }))
    }

    /// 2x2 max pooling at stride 2. Returns the pooled tensor and the flat
    /// argmax index (into the input) per output element; the backward pass
    /// routes each gradient to its argmax only. Ties keep the first element
    /// in row-major window order.
    pub fn maxpool2d(&mut self, x: TensorRef) -> Result<(TensorRef, Vec<u32>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch { op: "maxpool2d", detail: format!("input {xs:?}") });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!("maxpool2d: spatial dims must be even, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.values(x);
        let mut values = vec![0.0; c * ho * wo];
        let mut argmax = vec![0u32; c * ho * wo];
        for ch in 0..c {
            let plane = &xv[ch * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let at = (2 * oy + dy) * w + 2 * ox + dx;
                            if plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    values[(ch * ho + oy) * wo + ox] = best;
                    argmax[(ch * ho + oy) * wo + ox] = (ch * h * w + best_at) as u32;
                }
            }
        }
        let requires_grad = self.requires(x);
        let out = self.push(Node {
            op: Op::MaxPool2d { x, argmax: argmax.clone() },
            shape: vec![c, ho, wo],
            values,
            requires_grad,
            grad: None,
        });
        Ok((out, argmax))
    }

    /// Per-channel normalization over spatial positions (batch size is one
    /// throughout, so this is instance normalization): for each channel,
    /// `(x - mean) / sqrt(var + eps) * gain + bias` with biased variance.
    /// Gradients flow through the mean and variance.
    pub fn batchnorm(&mut self, x: TensorRef, gain: TensorRef, bias: TensorRef, eps: f64) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch { op: "batchnorm", detail: format!("input {xs:?}") });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h * w < 2 {
            return Err(Error::InvalidArgument("batchnorm: needs at least 2 spatial positions".into()));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                detail: format!("gain {:?} / bias {:?} for {c} channels", self.shape(gain), self.shape(bias)),
            });
        }
        let n = h * w;
        let xv = self.values(x);
        let gv = self.values(gain).to_vec();
        let bv = self.values(bias).to_vec();
        let mut values = vec![0.0; c * n];
        let mut mu = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let plane = &xv[ch * n..][..n];
            let m = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            mu[ch] = m;
            inv_std[ch] = is;
            let out = &mut values[ch * n..][..n];
            for (o, &v) in out.iter_mut().zip(plane) {
                *o = (v - m) * is * gv[ch] + bv[ch];
            }
        }
        let requires_grad = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(Node {
            op: Op::BatchNorm { x, gamma: gain, beta: bias, mu, inv_std },
            shape: xs,
            values,
            requires_grad,
            grad: None,
        }))
    }

    /// Affine map `y = W x + b` with `x: [n]`, `weights: [m, n]`, `bias: [m]`.
    pub fn dense(&mut self, x: TensorRef, weights: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weights).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                detail: format!("x {xs:?}, weights {ws:?}, bias {bs:?}"),
            });
        }
        let (m, n) = (ws[0], ws[1]);
        let xv = self.values(x);
        let wv = self.values(weights);
        let bv = self.values(bias);
        let values: Vec<f64> = (0..m).map(|j| dot(&wv[j * n..(j + 1) * n], xv) + bv[j]).collect();
        let requires_grad = self.requires(x) || self.requires(weights) || self.requires(bias);
        Ok(self.push(Node {
            op: Op::Dense { x, w: weights, b: bias },
            shape: vec![m],
            values,
            requires_grad,
            grad: None,
        }))
    }

    /// Elementwise `max(x, slope*x)`; the derivative at exactly zero takes
    /// the negative-side slope.
    pub fn leaky_relu(&mut self, x: TensorRef, slope: f64) -> Result<TensorRef> {
        let values = self.values(x).iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let shape = self.shape(x).to_vec();
        let requires_grad = self.requires(x);
        Ok(self.push(Node { op: Op::LeakyRelu { x, slope }, shape, values, requires_grad, grad: None }))
    }

    /// Numerically stable logistic function. Output lies in (0,1) within f64
    /// limits: it rounds to exactly 1 once x exceeds ~36.7 (where exp(-x)
    /// falls below machine epsilon) and to exactly 0 below ~-745 (where
    /// exp(x) underflows). Callers taking logs clamp first.
    pub fn sigmoid(&mut self, x: TensorRef) -> Result<TensorRef> {
        let values = self
            .values(x)
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let requires_grad = self.requires(x);
        Ok(self.push(Node { op: Op::Sigmoid(x), shape, values, requires_grad, grad: None }))
    }
}

// ---- convolution execution core ----
//
// Convolutions run through a blocked im2col: a column matrix
// `cols[(ic*kh+ky)*kw+kx][oy*wo+ox] = x[ic][oy*s+ky-pt][ox*s+kx-pl]`
// (zero outside the input) turns the forward pass, the kernel gradient and
// the input gradient into long contiguous axpy/dot passes. Blocks of output
// rows cap the column buffer at ~32 MB regardless of image size.

const COL_BLOCK_ELEMS: usize = 1 << 22;

/// Geometry of one convolution: input `[ci,h,w]`, kernels `kh`x`kw`, `co`
/// output channels, top/left zero padding, stride, output `[co,ho,wo]`.
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    pt: usize,
    pl: usize,
    s: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn same_padding(ci: usize, h: usize, w: usize, co: usize, kh: usize, kw: usize, s: usize) -> Self {
        ConvGeom {
            ci, h, w, co, kh, kw,
            pt: (kh - 1) / 2,
            pl: (kw - 1) / 2,
            s,
            ho: out_len(h, s),
            wo: out_len(w, s),
        }
    }

    fn kdim(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn rows_per_block(&self) -> usize {
        (COL_BLOCK_ELEMS / (self.kdim() * self.wo)).clamp(1, self.ho)
    }
}

/// Fills `cols` for output rows `oy0..oy1`; `cols` must already be zeroed.
fn im2col_block(x: &[f64], geo: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [f64]) {
    let block_w = (oy1 - oy0) * geo.wo;
    for ic in 0..geo.ci {
        let x_plane = &x[ic * geo.h * geo.w..][..geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((ic * geo.kh + ky) * geo.kw + kx) * block_w;
                for oy in oy0..oy1 {
                    let iy = (oy * geo.s + ky) as isize - geo.pt as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let src_row = iy as usize * geo.w;
                    let dst = &mut cols[row + (oy - oy0) * geo.wo..][..geo.wo];
                    if geo.s == 1 {
                        let ox_lo = geo.pl.saturating_sub(kx);
                        let ox_hi = geo.wo.min((geo.w + geo.pl).saturating_sub(kx));
                        if ox_lo < ox_hi {
                            let ix_lo = ox_lo + kx - geo.pl;
                            dst[ox_lo..ox_hi]
                                .copy_from_slice(&x_plane[src_row + ix_lo..src_row + ix_lo + ox_hi - ox_lo]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * geo.s + kx) as isize - geo.pl as isize;
                            if ix >= 0 && ix < geo.w as isize {
                                *d = x_plane[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient block back onto the input plane:
/// the exact adjoint of [`im2col_block`].
fn col2im_block(dcols: &[f64], geo: &ConvGeom, oy0: usize, oy1: usize, dx: &mut [f64]) {
    let block_w = (oy1 - oy0) * geo.wo;
    for ic in 0..geo.ci {
        let dx_plane = &mut dx[ic * geo.h * geo.w..][..geo.h * geo.w];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = ((ic * geo.kh + ky) * geo.kw + kx) * block_w;
                for oy in oy0..oy1 {
                    let iy = (oy * geo.s + ky) as isize - geo.pt as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let src_row = iy as usize * geo.w;
                    let src = &dcols[row + (oy - oy0) * geo.wo..][..geo.wo];
                    if geo.s == 1 {
                        let ox_lo = geo.pl.saturating_sub(kx);
                        let ox_hi = geo.wo.min((geo.w + geo.pl).saturating_sub(kx));
                        if ox_lo < ox_hi {
                            let ix_lo = ox_lo + kx - geo.pl;
                            axpy(
                                1.0,
                                &src[ox_lo..ox_hi],
                                &mut dx_plane[src_row + ix_lo..src_row + ix_lo + ox_hi - ox_lo],
                            );
                        }
                    } else {
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * geo.s + kx) as isize - geo.pl as isize;
                            if ix >= 0 && ix < geo.w as isize {
                                dx_plane[src_row + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// cols rows processed per stripe so a stripe stays cache-resident while
/// every output channel consumes it.
const R_STRIPE: usize = 32;

/// Forward convolution; `k` is `[co, kdim]` row-major, i.e. the usual
/// `[co, ci, kh, kw]` kernel block.
fn conv_exec_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, geo: &ConvGeom) -> Vec<f64> {
    let kd = geo.kdim();
    let hw = geo.ho * geo.wo;
    let mut y = vec![0.0; geo.co * hw];
    let block = geo.rows_per_block();
    let mut cols = vec![0.0; kd * block * geo.wo];
    let mut oy0 = 0;
    while oy0 < geo.ho {
        let oy1 = (oy0 + block).min(geo.ho);
        let block_w = (oy1 - oy0) * geo.wo;
        let cols = &mut cols[..kd * block_w];
        cols.fill(0.0);
        im2col_block(x, geo, oy0, oy1, cols);
        if let Some(b) = bias {
            for oc in 0..geo.co {
                y[oc * hw + oy0 * geo.wo..][..block_w].fill(b[oc]);
            }
        }
        let mut r0 = 0;
        while r0 < kd {
            let r1 = (r0 + R_STRIPE).min(kd);
            for oc in 0..geo.co {
                let y_rows = &mut y[oc * hw + oy0 * geo.wo..][..block_w];
                for r in r0..r1 {
                    axpy(k[oc * kd + r], &cols[r * block_w..][..block_w], y_rows);
                }
            }
            r0 = r1;
        }
        oy0 = oy1;
    }
    y
}

/// Backward convolution: accumulates the input gradient into `dx`, the
/// kernel gradient into `dk` (layout `[co, kdim]`), and the bias gradient
/// into `db`, for whichever buffers are supplied.
fn conv_exec_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    geo: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let kd = geo.kdim();
    let hw = geo.ho * geo.wo;
    if let Some(db) = db {
        for oc in 0..geo.co {
            db[oc] += g[oc * hw..][..hw].iter().sum::<f64>();
        }
    }
    if dx.is_none() && dk.is_none() {
        return;
    }
    let block = geo.rows_per_block();
    let mut cols = vec![0.0; kd * block * geo.wo];
    let mut dcols = if dx.is_some() { vec![0.0; kd * block * geo.wo] } else { Vec::new() };
    let mut oy0 = 0;
    while oy0 < geo.ho {
        let oy1 = (oy0 + block).min(geo.ho);
        let block_w = (oy1 - oy0) * geo.wo;
        let cols = &mut cols[..kd * block_w];
        cols.fill(0.0);
        im2col_block(x, geo, oy0, oy1, cols);
        if let Some(dk) = dk.as_deref_mut() {
            let mut r0 = 0;
            while r0 < kd {
                let r1 = (r0 + R_STRIPE).min(kd);
                for oc in 0..geo.co {
                    let g_rows = &g[oc * hw + oy0 * geo.wo..][..block_w];
                    for r in r0..r1 {
                        dk[oc * kd + r] += dot(g_rows, &cols[r * block_w..][..block_w]);
                    }
                }
                r0 = r1;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dcols = &mut dcols[..kd * block_w];
            dcols.fill(0.0);
            let mut r0 = 0;
            while r0 < kd {
                let r1 = (r0 + R_STRIPE).min(kd);
                for oc in 0..geo.co {
                    let g_rows = &g[oc * hw + oy0 * geo.wo..][..block_w];
                    for r in r0..r1 {
                        axpy(k[oc * kd + r], g_rows, &mut dcols[r * block_w..][..block_w]);
                    }
                }
                r0 = r1;
            }
            col2im_block(dcols, geo, oy0, oy1, dx);
        }
        oy0 = oy1;
    }
}

// ---- transposed convolution as a stuffed convolution ----
//
// A stride-s transposed convolution equals a stride-1 convolution over the
// zero-stuffed input (each pixel moved to s times its coordinates on an
// `[s*h, s*w]` grid) with source/target-flipped kernels and complementary
// padding `k-1-p`. Forward and both gradients reuse the machinery above on
// that view; the input gradient is read back from the stuffed grid at the
// occupied positions.

fn stuff_input(x: &[f64], ci: usize, h: usize, w: usize, s: usize) -> Vec<f64> {
    let (sh, sw) = (s * h, s * w);
    let mut out = vec![0.0; ci * sh * sw];
    for ic in 0..ci {
        for oy in 0..h {
            let src = &x[(ic * h + oy) * w..][..w];
            let dst_row = (ic * sh + s * oy) * sw;
            for (ox, &v) in src.iter().enumerate() {
                out[dst_row + s * ox] = v;
            }
        }
    }
    out
}

/// `[ci, co, kh, kw]` -> `[co, ci, kh, kw]` with both spatial axes reversed.
fn flip_swap_kernels(k: &[f64], ci: usize, co: usize, kh: usize, kw: usize) -> Vec<f64> {
    let mut out = vec![0.0; k.len()];
    for ic in 0..ci {
        for oc in 0..co {
            for ky in 0..kh {
                for kx in 0..kw {
                    out[((oc * ci + ic) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] =
                        k[((ic * co + oc) * kh + ky) * kw + kx];
                }
            }
        }
    }
    out
}

fn deconv_geom(ci: usize, h: usize, w: usize, co: usize, kh: usize, kw: usize, s: usize) -> ConvGeom {
    let (sh, sw) = (s * h, s * w);
    ConvGeom {
        ci,
        h: sh,
        w: sw,
        co,
        kh,
        kw,
        pt: kh - 1 - (kh - 1) / 2,
        pl: kw - 1 - (kw - 1) / 2,
        s: 1,
        ho: sh,
        wo: sw,
    }
}

// ---- forward kernels ----

fn conv_forward(
    x: &[f64], ci: usize, h: usize, w: usize,
    k: &[f64], co: usize, kh: usize, kw: usize,
    bias: Option<&[f64]>, s: usize,
) -> Vec<f64> {
    let geo = ConvGeom::same_padding(ci, h, w, co, kh, kw, s);
    conv_exec_forward(x, k, bias, &geo)
}

fn deconv_forward(
    x: &[f64], ci: usize, h: usize, w: usize,
    k: &[f64], co: usize, kh: usize, kw: usize,
    s: usize,
) -> Vec<f64> {
    let stuffed = stuff_input(x, ci, h, w, s);
    let kf = flip_swap_kernels(k, ci, co, kh, kw);
    let geo = deconv_geom(ci, h, w, co, kh, kw, s);
    conv_exec_forward(&stuffed, &kf, None, &geo)
}

// ---- backward kernels, called from tensor::propagate ----

/// Takes a node's gradient buffer for in-place accumulation, creating it on
/// first touch. Pair with `put_grad`. Returns None for constants.
fn take_grad(nodes: &mut [Node], t: TensorRef) -> Option<Vec<f64>> {
    let node = &mut nodes[t.0];
    if !node.requires_grad {
        return None;
    }
    Some(node.grad.take().unwrap_or_else(|| vec![0.0; node.values.len()]))
}

fn put_grad(nodes: &mut [Node], t: TensorRef, buf: Vec<f64>) {
    nodes[t.0].grad = Some(buf);
}

pub(crate) fn conv2d_backward(
    before: &mut [Node],
    x: TensorRef,
    k: TensorRef,
    bias: Option<TensorRef>,
    s: usize,
    _out_shape: &[usize],
    g: &[f64],
) {
    let (ci, h, w) = (before[x.0].shape[0], before[x.0].shape[1], before[x.0].shape[2]);
    let (co, kh, kw) = (before[k.0].shape[0], before[k.0].shape[2], before[k.0].shape[3]);
    let geo = ConvGeom::same_padding(ci, h, w, co, kh, kw, s);

    let mut dx = take_grad(before, x);
    let mut dk = take_grad(before, k);
    let mut db = bias.and_then(|b| take_grad(before, b));
    if dx.is_some() || dk.is_some() || db.is_some() {
        // The values borrows end before the grads are stored back.
        let (xv, kv) = (&before[x.0].values, &before[k.0].values);
        conv_exec_backward(xv, kv, g, &geo, dx.as_deref_mut(), dk.as_deref_mut(), db.as_deref_mut());
    }
    if let Some(dx) = dx {
        put_grad(before, x, dx);
    }
    if let Some(dk) = dk {
        put_grad(before, k, dk);
    }
    if let (Some(b), Some(db)) = (bias, db) {
        put_grad(before, b, db);
    }
}

pub(crate) fn deconv2d_backward(
    before: &mut [Node],
    x: TensorRef,
    k: TensorRef,
    s: usize,
    _out_shape: &[usize],
    g: &[f64],
) {
    let (ci, h, w) = (before[x.0].shape[0], before[x.0].shape[1], before[x.0].shape[2]);
    let (co, kh, kw) = (before[k.0].shape[1], before[k.0].shape[2], before[k.0].shape[3]);
    let geo = deconv_geom(ci, h, w, co, kh, kw, s);

    let mut dx = take_grad(before, x);
    let mut dk = take_grad(before, k);
    if dx.is_some() || dk.is_some() {
        let kf = flip_swap_kernels(&before[k.0].values, ci, co, kh, kw);
        let stuffed = stuff_input(&before[x.0].values, ci, h, w, s);
        let mut dstuffed = if dx.is_some() { vec![0.0; stuffed.len()] } else { Vec::new() };
        let mut dkf = if dk.is_some() { vec![0.0; kf.len()] } else { Vec::new() };
        conv_exec_backward(
            &stuffed,
            &kf,
            g,
            &geo,
            dx.as_ref().map(|_| dstuffed.as_mut_slice()),
            dk.as_ref().map(|_| dkf.as_mut_slice()),
            None,
        );
        if let Some(dx) = dx.as_deref_mut() {
            let (sh, sw) = (s * h, s * w);
            for ic in 0..ci {
                for oy in 0..h {
                    let src_row = (ic * sh + s * oy) * sw;
                    let dst = &mut dx[(ic * h + oy) * w..][..w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d += dstuffed[src_row + s * ox];
                    }
                }
            }
        }
        if let Some(dk) = dk.as_deref_mut() {
            for ic in 0..ci {
                for oc in 0..co {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            dk[((ic * co + oc) * kh + ky) * kw + kx] += dkf
                                [((oc * ci + ic) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)];
                        }
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        put_grad(before, x, dx);
    }
    if let Some(dk) = dk {
        put_grad(before, k, dk);
    }
}

pub(crate) fn batchnorm_backward(
    before: &mut [Node],
    x: TensorRef,
    gamma: TensorRef,
    beta: TensorRef,
    mu: &[f64],
    inv_std: &[f64],
    g: &[f64],
) {
    let (c, h, w) = (before[x.0].shape[0], before[x.0].shape[1], before[x.0].shape[2]);
    let n = h * w;

    // Per-channel sums over g and g*xhat, shared by all three gradients.
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    {
        let xv = &before[x.0].values;
        for ch in 0..c {
            let gp = &g[ch * n..][..n];
            let xp = &xv[ch * n..][..n];
            let mut sg = 0.0;
            let mut sgx = 0.0;
            for i in 0..n {
                let xhat = (xp[i] - mu[ch]) * inv_std[ch];
                sg += gp[i];
                sgx += gp[i] * xhat;
            }
            sum_g[ch] = sg;
            sum_gx[ch] = sgx;
        }
    }

    if let Some(mut dgamma) = take_grad(before, gamma) {
        for ch in 0..c {
            dgamma[ch] += sum_gx[ch];
        }
        put_grad(before, gamma, dgamma);
    }
    if let Some(mut dbeta) = take_grad(before, beta) {
        for ch in 0..c {
            dbeta[ch] += sum_g[ch];
        }
        put_grad(before, beta, dbeta);
    }
    if let Some(mut dx) = take_grad(before, x) {
        let xv = &before[x.0].values;
        let gv = &before[gamma.0].values;
        for ch in 0..c {
            let gp = &g[ch * n..][..n];
            let xp = &xv[ch * n..][..n];
            let dxp = &mut dx[ch * n..][..n];
            let scale = gv[ch] * inv_std[ch];
            let mean_g = sum_g[ch] / n as f64;
            let mean_gx = sum_gx[ch] / n as f64;
            for i in 0..n {
                let xhat = (xp[i] - mu[ch]) * inv_std[ch];
                dxp[i] += scale * (gp[i] - mean_g - xhat * mean_gx);
            }
        }
        put_grad(before, x, dx);
    }
}

pub(crate) fn dense_backward(before: &mut [Node], x: TensorRef, w: TensorRef, b: TensorRef, g: &[f64]) {
    let (m, n) = (before[w.0].shape[0], before[w.0].shape[1]);
    if let Some(mut dx) = take_grad(before, x) {
        let wv = &before[w.0].values;
        for j in 0..m {
            axpy(g[j], &wv[j * n..(j + 1) * n], &mut dx);
        }
        put_grad(before, x, dx);
    }
    if let Some(mut dw) = take_grad(before, w) {
        let xv = &before[x.0].values;
        for j in 0..m {
            axpy(g[j], xv, &mut dw[j * n..(j + 1) * n]);
        }
        put_grad(before, w, dw);
    }
    if let Some(mut db) = take_grad(before, b) {
        for j in 0..m {
            db[j] += g[j];
        }
        put_grad(before, b, db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradcheck, Tensor};
    use proptest::prelude::*;

    fn t(values: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(values.to_vec(), shape).unwrap()
    }

    /// Independent reference: materialize the zero-padded input and slide the
    /// window explicitly.
    fn conv_reference(
        x: &[f64], ci: usize, h: usize, w: usize,
        k: &[f64], co: usize, kh: usize, kw: usize,
        bias: Option<&[f64]>, s: usize,
    ) -> Vec<f64> {
        let ho = (h + s - 1) / s;
        let wo = (w + s - 1) / s;
        let pt = (kh - 1) / 2;
        let pl = (kw - 1) / 2;
        let (ph, pw) = (h + kh, w + kw);
        let mut padded = vec![0.0; ci * ph * pw];
        for ic in 0..ci {
            for iy in 0..h {
                for ix in 0..w {
                    padded[ic * ph * pw + (iy + pt) * pw + ix + pl] = x[ic * h * w + iy * w + ix];
                }
            }
        }
        let mut y = vec![0.0; co * ho * wo];
        for oc in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[oc]);
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += padded[ic * ph * pw + (oy * s + ky) * pw + ox * s + kx]
                                    * k[((oc * ci + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    y[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        y
    }

    fn rand_values(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, crate::rng::Role::InputNoise);
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn conv_scaling_and_identity_kernels() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]));
        let k2 = tape.constant(t(&[2.0], &[1, 1, 1, 1]));
        let y = tape.conv2d(x, k2, None, 1).unwrap();
        assert_eq!(tape.values(y), &[2.0, 4.0, 6.0, 8.0]);
        let k1 = tape.constant(t(&[1.0], &[1, 1, 1, 1]));
        let y = tape.conv2d(x, k1, None, 1).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn conv_even_kernel_matches_sliding_window() {
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let k = vec![1.0; 4];
        let mut tape = Tape::new();
        let xr = tape.constant(t(&x, &[1, 3, 3]));
        let kr = tape.constant(t(&k, &[1, 1, 2, 2]));
        let y = tape.conv2d(xr, kr, None, 1).unwrap();
        let expect = conv_reference(&x, 1, 3, 3, &k, 1, 2, 2, None, 1);
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        for (a, b) in tape.values(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_random_multichannel_matches_reference() {
        for &(s, h, w) in &[(1usize, 8usize, 6usize), (2, 8, 8), (2, 6, 6)] {
            let (ci, co, kh, kw) = (2, 3, 5, 5);
            let x = rand_values(ci * h * w, 21);
            let k = rand_values(co * ci * kh * kw, 22);
            let b = rand_values(co, 23);
            let mut tape = Tape::new();
            let xr = tape.constant(t(&x, &[ci, h, w]));
            let kr = tape.constant(t(&k, &[co, ci, kh, kw]));
            let br = tape.constant(t(&b, &[co]));
            let y = tape.conv2d(xr, kr, Some(br), s).unwrap();
            let expect = conv_reference(&x, ci, h, w, &k, co, kh, kw, Some(&b), s);
            assert_eq!(tape.values(y).len(), expect.len());
            for (a, e) in tape.values(y).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-10, "stride {s}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[3, 1, 5, 5]));
        assert!(tape.conv2d(x, k, None, 1).is_err());
    }

    #[test]
    fn deconv_single_pixel_scatter() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[5.0], &[1, 1, 1]));
        let k = tape.constant(t(&[1.0], &[1, 1, 1, 1]));
        let y = tape.deconv2d(x, k, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.values(y), &[5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn deconv_zero_input_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 3]));
        let k = tape.constant(t(&rand_values(2 * 4 * 25, 31), &[2, 4, 5, 5]));
        let y = tape.deconv2d(x, k, 2).unwrap();
        assert!(tape.values(y).iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(y), &[4, 6, 6]);
    }

    #[test]
    fn conv_deconv_adjoint_inner_product() {
        // <conv(x), y> == <x, deconv(y)> with the same kernel tensor read in
        // the two layouts.
        let (ci, co, h, w, s) = (2, 3, 8, 8, 2);
        let x = rand_values(ci * h * w, 41);
        let k = rand_values(co * ci * 25, 42);
        let y = rand_values(co * (h / s) * (w / s), 43);
        let mut tape = Tape::new();
        let xr = tape.constant(t(&x, &[ci, h, w]));
        let kr = tape.constant(t(&k, &[co, ci, 5, 5]));
        let conv_x = tape.conv2d(xr, kr, None, s).unwrap();
        let yr = tape.constant(t(&y, &[co, h / s, w / s]));
        let kr_t = tape.constant(t(&k, &[co, ci, 5, 5]));
        let deconv_y = tape.deconv2d(yr, kr_t, s).unwrap();
        assert_eq!(tape.shape(deconv_y), &[ci, h, w]);
        let lhs: f64 = tape.values(conv_x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(tape.values(deconv_y)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn deconv_matches_materialized_transpose() {
        // Materialize the stride-2 conv as a matrix via the reference
        // implementation on basis vectors; deconv must apply its transpose.
        let (ci, co, h, w, s) = (1usize, 2usize, 4usize, 4usize, 2usize);
        let k = rand_values(co * ci * 25, 51);
        let n_in = ci * h * w;
        let n_out = co * (h / s) * (w / s);
        let mut conv_matrix = vec![0.0; n_out * n_in]; // row r = conv of basis e_c
        for c in 0..n_in {
            let mut e = vec![0.0; n_in];
            e[c] = 1.0;
            let col = conv_reference(&e, ci, h, w, &k, co, 5, 5, None, s);
            for r in 0..n_out {
                conv_matrix[r * n_in + c] = col[r];
            }
        }
        let y = rand_values(n_out, 52);
        let mut expect = vec![0.0; n_in];
        for r in 0..n_out {
            for c in 0..n_in {
                expect[c] += conv_matrix[r * n_in + c] * y[r];
            }
        }
        let mut tape = Tape::new();
        let yr = tape.constant(t(&y, &[co, h / s, w / s]));
        let kr = tape.constant(t(&k, &[co, ci, 5, 5]));
        let got = tape.deconv2d(yr, kr, s).unwrap();
        for (a, e) in tape.values(got).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn maxpool_examples_and_reference() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]));
        let (y, argmax) = tape.maxpool2d(x).unwrap();
        assert_eq!(tape.values(y), &[4.0]);
        assert_eq!(argmax, vec![3]);

        let c = tape.constant(t(&[0.7; 16], &[1, 4, 4]));
        let (y, _) = tape.maxpool2d(c).unwrap();
        assert_eq!(tape.values(y), &[0.7; 4]);

        let vals = rand_values(2 * 8 * 8, 61);
        let xr = tape.constant(t(&vals, &[2, 8, 8]));
        let (y, _) = tape.maxpool2d(xr).unwrap();
        for ch in 0..2 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(vals[ch * 64 + (2 * oy + dy) * 8 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(tape.values(y)[(ch * 4 + oy) * 4 + ox], best);
                }
            }
        }
    }

    #[test]
    fn maxpool_odd_dims_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(tape.maxpool2d(x).is_err());
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1.0, 3.0], &[1, 1, 2]));
        let gain = tape.constant(t(&[1.0], &[1]));
        let bias = tape.constant(t(&[0.0], &[1]));
        let y = tape.batchnorm(x, gain, bias, 1e-12).unwrap();
        assert!((tape.values(y)[0] + 1.0).abs() < 1e-9);
        assert!((tape.values(y)[1] - 1.0).abs() < 1e-9);

        // Constant channel: variance is zero up to rounding on the mean, and
        // the eps guard keeps the output at zero to ~1e-14.
        let cx = tape.constant(t(&[0.4; 6], &[1, 2, 3]));
        let y = tape.batchnorm(cx, gain, bias, 1e-5).unwrap();
        assert!(tape.values(y).iter().all(|&v| v.abs() < 1e-9));

        let gain2 = tape.constant(t(&[2.0], &[1]));
        let bias1 = tape.constant(t(&[1.0], &[1]));
        let y = tape.batchnorm(x, gain2, bias1, 1e-12).unwrap();
        assert!((tape.values(y)[0] + 1.0).abs() < 1e-8);
        assert!((tape.values(y)[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn batchnorm_needs_two_positions() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 1, 1]));
        let g = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.batchnorm(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn dense_identity_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1.5, -2.0, 0.25], &[3]));
        let eye = tape.constant(t(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]));
        let zero = tape.constant(Tensor::zeros(&[3]));
        let y = tape.dense(x, eye, zero).unwrap();
        assert_eq!(tape.values(y), tape.values(x));

        let w_bad = tape.constant(Tensor::zeros(&[2, 4]));
        let b2 = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.dense(x, w_bad, b2).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[-1.0, 2.0], &[2]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.values(y), &[-0.2, 2.0]);

        let z = tape.param(t(&[0.0], &[1]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.values(s), &[0.5]);
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[0.25]);
    }

    #[test]
    fn gradcheck_conv2d() {
        let x = t(&rand_values(2 * 6 * 6, 71), &[2, 6, 6]);
        let k = t(&rand_values(3 * 2 * 25, 72), &[3, 2, 5, 5]);
        let b = t(&rand_values(3, 73), &[3]);
        gradcheck::check(&[x, k, b], |tape, p| {
            let y = tape.conv2d(p[0], p[1], Some(p[2]), 1).unwrap();
            let s = tape.square(y).unwrap();
            tape.sum(s).unwrap()
        }, 1e-4);
    }

    #[test]
    fn gradcheck_conv2d_stride2() {
        let x = t(&rand_values(2 * 6 * 6, 81), &[2, 6, 6]);
        let k = t(&rand_values(2 * 2 * 9, 82), &[2, 2, 3, 3]);
        gradcheck::check(&[x, k], |tape, p| {
            let y = tape.conv2d(p[0], p[1], None, 2).unwrap();
            let s = tape.square(y).unwrap();
            tape.sum(s).unwrap()
        }, 1e-4);
    }

    #[test]
    fn gradcheck_deconv2d() {
        let x = t(&rand_values(2 * 3 * 3, 74), &[2, 3, 3]);
        let k = t(&rand_values(2 * 3 * 25, 75), &[2, 3, 5, 5]);
        gradcheck::check(&[x, k], |tape, p| {
            let y = tape.deconv2d(p[0], p[1], 2).unwrap();
            let s = tape.square(y).unwrap();
            tape.sum(s).unwrap()
        }, 1e-4);
    }

    #[test]
    fn gradcheck_maxpool() {
        // Values spaced well apart so the argmax is stable under the
        // finite-difference step.
        let vals: Vec<f64> = (0..16).map(|i| ((i * 7) % 16) as f64 * 0.5).collect();
        let x = t(&vals, &[1, 4, 4]);
        gradcheck::check(&[x], |tape, p| {
            let (y, _) = tape.maxpool2d(p[0]).unwrap();
            let s = tape.square(y).unwrap();
            tape.sum(s).unwrap()
        }, 1e-4);
    }

    #[test]
    fn gradcheck_batchnorm() {
        let x = t(&rand_values(2 * 4 * 4, 76), &[2, 4, 4]);
        let gain = t(&[1.3, 0.7], &[2]);
        let bias = t(&[0.1, -0.4], &[2]);
        gradcheck::check(&[x, gain, bias], |tape, p| {
            let y = tape.batchnorm(p[0], p[1], p[2], 1e-5).unwrap();
            let s = tape.square(y).unwrap();
            tape.sum(s).unwrap()
        }, 1e-4);
    }

    #[test]
    fn gradcheck_dense_and_activations() {
        let x = t(&rand_values(5, 77), &[5]);
        let w = t(&rand_values(4 * 5, 78), &[4, 5]);
        let b = t(&rand_values(4, 79), &[4]);
        gradcheck::check(&[x, w, b], |tape, p| {
            let y = tape.dense(p[0], p[1], p[2]).unwrap();
            let a = tape.leaky_relu(y, 0.2).unwrap();
            let s = tape.sigmoid(a).unwrap();
            let q = tape.square(s).unwrap();
            tape.sum(q).unwrap()
        }, 1e-4);
    }

    proptest! {
        #[test]
        // Domain bounded by f64 representability: above ~36.7 the result
        // rounds to exactly 1, below ~-745 to exactly 0.
        fn sigmoid_stays_in_open_unit_interval(v in -700.0f64..36.0) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::scalar(v));
            let y = tape.sigmoid(x).unwrap();
            let out = tape.values(y)[0];
            prop_assert!(out > 0.0 && out < 1.0);
        }

        #[test]
        fn leaky_relu_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, slope in 0.01f64..0.99) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let mut tape = Tape::new();
            let x = tape.constant(t(&[lo, hi], &[2]));
            let y = tape.leaky_relu(x, slope).unwrap();
            prop_assert!(tape.values(y)[0] <= tape.values(y)[1]);
        }
    }
}
