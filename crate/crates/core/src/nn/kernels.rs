//! Forward kernels for the supported layer kinds.

use crate::error::{Error, Result};
use crate::tensor::{pad2d, Tensor};

use super::spec::{output_extent, Conv2d, Dense, PoolVariant, PoolWindow};

/// Cross-correlation with stride and zero padding, bias added per output channel.
pub fn conv2d_forward(input: &Tensor, layer: &Conv2d) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if layer.weights.dims().len() != 4 || c != layer.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "conv weights {} vs input {}",
            layer.weights.shape(),
            input.shape()
        )));
    }
    let (kh, kw) = layer.kernel();
    let s = layer.stride;
    let (oh, ow) = match (
        output_extent(h, kh, s, layer.padding),
        output_extent(w, kw, s, layer.padding),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "{kh}x{kw} kernel does not fit {h}x{w} input with padding {}",
                layer.padding
            )))
        }
    };
    let padded = pad2d(input, layer.padding)?;
    let (_, ph, pw) = padded.chw()?;
    let geo = ConvGeometry {
        channels: c,
        padded_h: ph,
        padded_w: pw,
        kernel_h: kh,
        kernel_w: kw,
        stride: s,
        out_h: oh,
        out_w: ow,
    };
    let cols = im2col(padded.data(), &geo);
    let k = geo.patch_len();
    let wts = layer.weights.data();
    let oc_n = layer.out_channels();
    let pixels = oh * ow;
    let mut out = vec![0.0f32; oc_n * pixels];
    for (oc, plane) in out.chunks_exact_mut(pixels).enumerate() {
        let row = &wts[oc * k..(oc + 1) * k];
        for (v, patch) in plane.iter_mut().zip(cols.chunks_exact(k)) {
            *v = layer.bias[oc] + dot(row, patch);
        }
    }
    Tensor::from_dims(&[oc_n, oh, ow], out)
}

/// Geometry of a convolution over an already padded input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Elements of one receptive field, ordered like a weight row `[ic][ky][kx]`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Padded-plane offset of every patch element for output pixel `(oy, ox)`.
    fn for_each_tap(&self, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
        let plane = self.padded_h * self.padded_w;
        let mut k = 0;
        for ic in 0..self.channels {
            for ky in 0..self.kernel_h {
                let base = ic * plane + (oy * self.stride + ky) * self.padded_w + ox * self.stride;
                for kx in 0..self.kernel_w {
                    f(k, base + kx);
                    k += 1;
                }
            }
        }
    }
}

/// One row per output pixel holding its receptive field.
pub(crate) fn im2col(padded: &[f32], geo: &ConvGeometry) -> Vec<f32> {
    let k = geo.patch_len();
    let mut cols = vec![0.0f32; geo.out_h * geo.out_w * k];
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let row = &mut cols[(oy * geo.out_w + ox) * k..][..k];
            geo.for_each_tap(oy, ox, |i, src| row[i] = padded[src]);
        }
    }
    cols
}

/// Adds every patch row of `cols` back onto the padded plane it came from.
pub(crate) fn col2im(cols: &[f32], geo: &ConvGeometry) -> Vec<f32> {
    let k = geo.patch_len();
    let mut padded = vec![0.0f32; geo.channels * geo.padded_h * geo.padded_w];
    for oy in 0..geo.out_h {
        for ox in 0..geo.out_w {
            let row = &cols[(oy * geo.out_w + ox) * k..][..k];
            geo.for_each_tap(oy, ox, |i, dst| padded[dst] += row[i]);
        }
    }
    padded
}

/// Dot product with eight independent accumulators so the loop vectorises.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// `y += alpha * x`.
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data: Vec<f32> = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().clone(), data).expect("shape preserved")
}

/// Result of a max-pool pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPoolOutput {
    pub output: Tensor,
    /// Per output cell, the flat index of the selected element within its
    /// (zero-padded) channel plane. Without padding this is the input plane index.
    pub argmax: Vec<usize>,
    /// Executions of the max-update assignment over all windows.
    pub update_count: u64,
}

/// Max pooling with zero padding. Padding cells hold 0.0 and can be selected.
pub fn maxpool_forward(
    input: &Tensor,
    window: &PoolWindow,
    variant: PoolVariant,
) -> Result<MaxPoolOutput> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = window
        .output_hw(h, w)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let padded = pad2d(input, window.padding)?;
    let (_, ph, pw) = padded.chw()?;
    let src = padded.data();

    let mut out = vec![0.0f32; c * oh * ow];
    let mut argmax = vec![0usize; c * oh * ow];
    let mut updates = 0u64;
    for ch in 0..c {
        let plane = &src[ch * ph * pw..(ch + 1) * ph * pw];
        for oy in 0..oh {
            for ox in 0..ow {
                let y0 = oy * window.stride;
                let x0 = ox * window.stride;
                let (val, idx, n) = match variant {
                    PoolVariant::NaiveBranchy => {
                        window_max_branchy(plane, pw, y0, x0, window.kernel_h, window.kernel_w)
                    }
                    PoolVariant::ConstantTime => {
                        window_max_select(plane, pw, y0, x0, window.kernel_h, window.kernel_w)
                    }
                };
                let o = (ch * oh + oy) * ow + ox;
                out[o] = val;
                argmax[o] = idx;
                updates += n;
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::from_dims(&[c, oh, ow], out)?,
        argmax,
        update_count: updates,
    })
}

/// Branchy scan: the assignment only runs when the condition holds, so the
/// number of executions depends on where the maximum sits in the window.
#[inline(never)]
fn window_max_branchy(
    plane: &[f32],
    pw: usize,
    y0: usize,
    x0: usize,
    kh: usize,
    kw: usize,
) -> (f32, usize, u64) {
    let mut maxval = f32::NEG_INFINITY;
    let mut maxindex = y0 * pw + x0;
    let mut updates = 0u64;
    for y in y0..y0 + kh {
        for x in x0..x0 + kw {
            let index = y * pw + x;
            let val = plane[index];
            if (val > maxval) || val.is_nan() {
                maxval = val;
                maxindex = index;
                updates += 1;
            }
        }
    }
    (maxval, maxindex, updates)
}

/// Select scan: both candidates are written to a two-slot array and the
/// comparison result indexes it, so every element costs the same work.
///
/// The selector is computed once per element and reused for value and index.
/// `val <= maxval` keeps the incumbent on ties, so the first maximum wins as in
/// the branchy scan.
#[inline(never)]
fn window_max_select(
    plane: &[f32],
    pw: usize,
    y0: usize,
    x0: usize,
    kh: usize,
    kw: usize,
) -> (f32, usize, u64) {
    let mut maxval = f32::NEG_INFINITY;
    let mut maxindex = y0 * pw + x0;
    let mut tmp_val = [0.0f32; 2];
    let mut tmp_idx = [0usize; 2];
    let mut updates = 0u64;
    for y in y0..y0 + kh {
        for x in x0..x0 + kw {
            let index = y * pw + x;
            let val = plane[index];
            let keep = (val <= maxval) as usize;
            tmp_val[0] = val;
            tmp_val[1] = maxval;
            maxval = tmp_val[keep];
            tmp_idx[0] = index;
            tmp_idx[1] = maxindex;
            maxindex = tmp_idx[keep];
            updates += 1;
        }
    }
    (maxval, maxindex, updates)
}

/// Mean pooling; the divisor is always `kh * kw`, padding zeros included.
pub fn avgpool_forward(input: &Tensor, window: &PoolWindow) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = window
        .output_hw(h, w)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let padded = pad2d(input, window.padding)?;
    let (_, ph, pw) = padded.chw()?;
    let src = padded.data();
    let denom = (window.kernel_h * window.kernel_w) as f32;
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        let plane = &src[ch * ph * pw..(ch + 1) * ph * pw];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0f32;
                for y in oy * window.stride..oy * window.stride + window.kernel_h {
                    let row = &plane[y * pw + ox * window.stride..];
                    sum += row[..window.kernel_w].iter().sum::<f32>();
                }
                out[(ch * oh + oy) * ow + ox] = sum / denom;
            }
        }
    }
    Tensor::from_dims(&[c, oh, ow], out)
}

/// `out[i] = sum_j W[i,j] x[j] + b[i]` over the row-major flattened input.
pub fn dense_forward(input: &Tensor, layer: &Dense) -> Result<Tensor> {
    let d = layer.weights.dims();
    if d.len() != 2 || input.len() != d[1] || layer.bias.len() != d[0] {
        return Err(Error::ShapeMismatch(format!(
            "dense weights {} with {} biases vs input of {} features",
            layer.weights.shape(),
            layer.bias.len(),
            input.len()
        )));
    }
    let x = input.data();
    let out: Vec<f32> = layer
        .weights
        .data()
        .chunks_exact(d[1])
        .zip(&layer.bias)
        .map(|(row, &b)| dot(row, x) + b)
        .collect();
    Tensor::from_dims(&[d[0]], out)
}

/// Numerically stable softmax over all elements.
pub fn softmax(input: &Tensor) -> Tensor {
    let max = input
        .data()
        .iter()
        .copied()
        .fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = input.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    Tensor::new(
        input.shape().clone(),
        exps.into_iter().map(|e| e / sum).collect::<Vec<_>>(),
    )
    .expect("shape preserved")
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
