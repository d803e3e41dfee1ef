//! Forward and backward passes for the individual building blocks. All
//! activations are `C×H×W` tensors.

use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::scratch;
use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor inside [`standardize`].
pub const STANDARDIZE_EPS: f64 = 1e-5;

const NORM_EPS: f64 = 1e-12;

/// Same-size 2-D convolution: stride 1, zero padding `kernel / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    /// `[out]`; left out when the next layer standardizes per channel,
    /// which would cancel it exactly.
    pub bias: Option<Tensor>,
}

impl Conv2d {
    /// Uniform init in `±sqrt(1 / (k²·in))`, zero bias.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel extent must be odd");
        let bound = (1.0 / (kernel * kernel * in_ch) as f64).sqrt();
        let weight = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::from_parts(vec![out_ch, in_ch, kernel, kernel], weight),
            bias: Some(Tensor::zeros(&[out_ch])),
        }
    }

    pub fn without_bias(self) -> Self {
        Self { bias: None, ..self }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Some(Tensor::zeros(&[out_ch])),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let ok = match weight.shape() {
            [o, _, k, k2] => {
                k == k2 && k % 2 == 1 && bias.as_ref().is_none_or(|b| b.shape() == [*o])
            }
            _ => false,
        };
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "conv weight {:?} / bias {:?} do not describe an odd square kernel",
                weight.shape(),
                bias.as_ref().map(Tensor::shape)
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (c, h, w) = x.dims3()?;
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        Ok((c, h, w))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (y, cols) = self.forward_cols(x)?;
        scratch::give(cols);
        Ok(y)
    }

    /// Forward pass that also returns the unfolded input, which is all the
    /// backward pass needs.
    pub(crate) fn forward_cols(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let (c, h, w) = self.check_input(x)?;
        let k = self.kernel();
        let hw = h * w;
        let cols = if k == 1 {
            x.data().to_vec()
        } else {
            im2col(x.data(), c, h, w, k)
        };
        let out_ch = self.out_channels();
        let mut y = Vec::with_capacity(out_ch * hw);
        match &self.bias {
            Some(bias) => {
                for &b in bias.data() {
                    y.extend(std::iter::repeat_n(b, hw));
                }
            }
            None => y.resize(out_ch * hw, 0.0),
        }
        gemm(
            MatRef::new(self.weight.data(), out_ch, c * k * k),
            MatRef::new(&cols, c * k * k, hw),
            1.0,
            &mut y,
        );
        Ok((Tensor::from_parts(vec![out_ch, h, w], y), cols))
    }

    /// Returns `(d input, d weight, d bias)`.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
    ) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let (c, h, w) = self.check_input(x)?;
        let k = self.kernel();
        let cols = if k == 1 {
            x.data().to_vec()
        } else {
            im2col(x.data(), c, h, w, k)
        };
        let (dx, dw, db) = self.backward_cols(&cols, (c, h, w), grad_out, true)?;
        scratch::give(cols);
        Ok((dx.expect("input gradient requested"), dw, db))
    }

    /// Backward pass from the unfolded input; the input gradient is only
    /// computed when `want_dx` is set.
    pub(crate) fn backward_cols(
        &self,
        cols: &[f64],
        (c, h, w): (usize, usize, usize),
        grad_out: &Tensor,
        want_dx: bool,
    ) -> Result<(Option<Tensor>, Tensor, Option<Tensor>)> {
        let out_ch = self.out_channels();
        if grad_out.shape() != [out_ch, h, w] {
            return Err(Error::ShapeMismatch(format!(
                "conv output gradient {:?}, expected [{out_ch}, {h}, {w}]",
                grad_out.shape()
            )));
        }
        let k = self.kernel();
        let hw = h * w;
        let patch = c * k * k;
        let gy = grad_out.data();

        let mut dw = vec![0.0; out_ch * patch];
        gemm(
            MatRef::new(gy, out_ch, hw),
            MatRef::t(cols, hw, patch),
            0.0,
            &mut dw,
        );
        let db = self.bias.as_ref().map(|_| {
            let db = gy.chunks_exact(hw).map(|row| row.iter().sum()).collect();
            Tensor::from_parts(vec![out_ch], db)
        });

        let dx = want_dx.then(|| {
            // overwritten in full: beta = 0 never reads the old contents
            let mut dcols = scratch::take(patch * hw);
            gemm(
                MatRef::t(self.weight.data(), patch, out_ch),
                MatRef::new(gy, out_ch, hw),
                0.0,
                &mut dcols,
            );
            let dx = if k == 1 {
                dcols
            } else {
                let dx = col2im(&dcols, c, h, w, k);
                scratch::give(dcols);
                dx
            };
            Tensor::from_parts(vec![c, h, w], dx)
        });
        Ok((dx, Tensor::from_parts(self.weight.shape().to_vec(), dw), db))
    }
}

/// Unfold zero-padded `k×k` neighbourhoods: row `(ci·k + ky)·k + kx`,
/// column `y·w + x`.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = scratch::take(c * k * k * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = shifted_range(w, dx);
                for y in 0..h {
                    let dst = &mut row[y * w..][..w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    dst[..x0].fill(0.0);
                    dst[x1..].fill(0.0);
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let (x0, x1) = shifted_range(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    for xo in x0..x1 {
                        dst[(xo as isize + dx) as usize] += src[xo];
                    }
                }
            }
        }
    }
    x
}

/// Output columns `xo` for which `xo + dx` stays inside `0..w`.
fn shifted_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| v.max(0.0)).collect(),
    )
}

/// Gradient through ReLU given its input.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    x.same_shape(grad_out)?;
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(grad_out.data())
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}

/// Per-channel standardization over the spatial extent. Returns the
/// normalized tensor and the per-channel inverse standard deviations.
pub fn standardize(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (c, h, w) = x.dims3()?;
    let hw = (h * w) as f64;
    let mut out = x.data().to_vec();
    let mut inv_std = Vec::with_capacity(c);
    for plane in out.chunks_exact_mut(h * w) {
        let mean = plane.iter().sum::<f64>() / hw;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
        let inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
        plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    Ok((Tensor::from_parts(vec![c, h, w], out), inv_std))
}

/// Backward of [`standardize`] from its output `y` and inverse stds.
pub fn standardize_backward(y: &Tensor, inv_std: &[f64], grad_out: &Tensor) -> Result<Tensor> {
    y.same_shape(grad_out)?;
    let (_, h, w) = y.dims3()?;
    let hw = h * w;
    let n = hw as f64;
    let mut dx = Vec::with_capacity(y.len());
    for ((yp, gp), &inv) in y
        .data()
        .chunks_exact(hw)
        .zip(grad_out.data().chunks_exact(hw))
        .zip(inv_std)
    {
        let mean_g = gp.iter().sum::<f64>() / n;
        let mean_gy = gp.iter().zip(yp).map(|(g, y)| g * y).sum::<f64>() / n;
        dx.extend(
            gp.iter()
                .zip(yp)
                .map(|(g, y)| inv * (g - mean_g - y * mean_gy)),
        );
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), dx))
}

/// 2×2 average pooling with stride 2; spatial extents must be even.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "2x2 pooling needs even extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = &xd[ci * h * w..];
        for y in 0..oh {
            let r0 = &plane[2 * y * w..][..w];
            let r1 = &plane[(2 * y + 1) * w..][..w];
            for xo in 0..ow {
                out.push(0.25 * (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]));
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub fn avg_pool2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.dims3()?;
    let (h, w) = (2 * oh, 2 * ow);
    let g = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for xo in 0..w {
                dx[(ci * h + y) * w + xo] = 0.25 * g[(ci * oh + y / 2) * ow + xo / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], dx))
}

/// Source taps for one axis of bilinear upsampling (half-pixel centers,
/// edge-clamped): `(lower index, upper index, upper weight)`.
fn bilinear_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..src * factor)
        .map(|o| {
            let pos = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "upsample factor must be positive".into(),
        ));
    }
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let plane = &xd[ci * h * w..][..h * w];
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub fn upsample_bilinear_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.dims3()?;
    if factor == 0 || oh % factor != 0 || ow % factor != 0 {
        return Err(Error::ShapeMismatch(format!(
            "gradient {oh}x{ow} is not a x{factor} upsampling"
        )));
    }
    let (h, w) = (oh / factor, ow / factor);
    let (ty, tx) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let g = grad_out.data();
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..][..h * w];
        let gp = &g[ci * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = gp[oy * ow + ox];
                plane[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                plane[y0 * w + x1] += v * (1.0 - wy) * wx;
                plane[y1 * w + x0] += v * wy * (1.0 - wx);
                plane[y1 * w + x1] += v * wy * wx;
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], dx))
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, h, w) = a.dims3()?;
    let (cb, hb, wb) = b.dims3()?;
    if (h, w) != (hb, wb) {
        return Err(Error::ShapeMismatch(format!(
            "cannot concatenate {h}x{w} with {hb}x{wb}"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::from_parts(vec![ca + cb, h, w], data))
}

/// Inverse of [`concat_channels`]: the first `first` channels, then the rest.
pub fn split_channels(x: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = x.dims3()?;
    if first > c {
        return Err(Error::ShapeMismatch(format!(
            "cannot split {first} of {c} channels"
        )));
    }
    let (a, b) = x.data().split_at(first * h * w);
    Ok((
        Tensor::from_parts(vec![first, h, w], a.to_vec()),
        Tensor::from_parts(vec![c - first, h, w], b.to_vec()),
    ))
}

/// Softmax across channels at every pixel.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let hw = h * w;
    let xd = x.data();
    // whole channel planes at a time; per pixel the arithmetic and its
    // order are those of a loop over channels
    let mut max = vec![f64::NEG_INFINITY; hw];
    for plane in xd.chunks_exact(hw.max(1)) {
        for (m, &v) in max.iter_mut().zip(plane) {
            *m = m.max(v);
        }
    }
    let mut out = vec![0.0; xd.len()];
    let mut sum = vec![0.0; hw];
    for (o, plane) in out
        .chunks_exact_mut(hw.max(1))
        .zip(xd.chunks_exact(hw.max(1)))
    {
        for (((o, &v), &m), s) in o.iter_mut().zip(plane).zip(&max).zip(sum.iter_mut()) {
            *o = (v - m).exp();
            *s += *o;
        }
    }
    for o in out.chunks_exact_mut(hw.max(1)) {
        for (o, s) in o.iter_mut().zip(&sum) {
            *o /= s;
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Gradient w.r.t. the logits given softmax output `probs` and `d probs`.
pub fn softmax_channels_backward(probs: &Tensor, grad_probs: &Tensor) -> Result<Tensor> {
    probs.same_shape(grad_probs)?;
    let (c, h, w) = probs.dims3()?;
    let hw = h * w;
    let (p, g) = (probs.data(), grad_probs.data());
    let mut dot = vec![0.0; hw];
    for (pp, gp) in p.chunks_exact(hw.max(1)).zip(g.chunks_exact(hw.max(1))) {
        for ((d, a), b) in dot.iter_mut().zip(pp).zip(gp) {
            *d += a * b;
        }
    }
    let mut dz = vec![0.0; p.len()];
    for ((zp, pp), gp) in dz
        .chunks_exact_mut(hw.max(1))
        .zip(p.chunks_exact(hw.max(1)))
        .zip(g.chunks_exact(hw.max(1)))
    {
        for (((z, a), b), d) in zp.iter_mut().zip(pp).zip(gp).zip(&dot) {
            *z = a * (b - d);
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], dz))
}

/// Divide every pixel's channel vector by `max(‖v‖₂, 1e-12)`.
pub fn l2_normalize_channels(t: &Tensor) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let hw = h * w;
    let d = t.data();
    let mut sq = vec![0.0; hw];
    for plane in d.chunks_exact(hw.max(1)) {
        for (s, v) in sq.iter_mut().zip(plane) {
            *s += v.powi(2);
        }
    }
    let inv: Vec<f64> = sq.iter().map(|s| 1.0 / s.sqrt().max(NORM_EPS)).collect();
    let mut out = d.to_vec();
    for plane in out.chunks_exact_mut(hw.max(1)) {
        for (v, i) in plane.iter_mut().zip(&inv) {
            *v *= i;
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}
