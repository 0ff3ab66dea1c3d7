use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{axpy, col2im, im2col, ConvGeometry};
use crate::nn::{forward_trace, Conv2d, Dense, LayerSpec, ModelSpec, PoolWindow};
use crate::tensor::{pad2d, Tensor};

/// Gradient of one parameterised layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGrad {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Per-layer parameter gradients, aligned with `ModelSpec::layers`.
/// Layers without parameters hold `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub layers: Vec<Option<ParamGrad>>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelSpec) -> Self {
        let layers = model
            .layers()
            .iter()
            .map(|l| match l {
                LayerSpec::Conv2d(c) => Some(ParamGrad {
                    weights: vec![0.0; c.weights.len()],
                    bias: vec![0.0; c.bias.len()],
                }),
                LayerSpec::Dense(d) => Some(ParamGrad {
                    weights: vec![0.0; d.weights.len()],
                    bias: vec![0.0; d.bias.len()],
                }),
                _ => None,
            })
            .collect();
        Gradients { layers }
    }

    pub fn len(&self) -> usize {
        self.params().map(|p| p.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter slices in canonical order: per layer, weights then bias.
    pub fn params(&self) -> impl Iterator<Item = &[f32]> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|g| [g.weights.as_slice(), g.bias.as_slice()])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Vec<f32>> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|g| [&mut g.weights, &mut g.bias])
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.params().flatten().copied().collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.params()
            .flatten()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f32) {
        for p in self.params_mut() {
            p.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += other`, element-wise.
    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::AlignmentError("layer counts differ".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (Some(a), Some(b))
                    if a.weights.len() == b.weights.len() && a.bias.len() == b.bias.len() =>
                {
                    a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
                    a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
                }
                (None, None) => {}
                _ => return Err(Error::AlignmentError("parameter layouts differ".into())),
            }
        }
        Ok(())
    }
}

/// Cross-entropy loss and parameter gradients for one example.
///
/// The model must end in `Softmax`; the softmax and the loss are
/// differentiated jointly through the pre-softmax scores.
pub fn example_gradients(
    model: &ModelSpec,
    input: &Tensor,
    label: usize,
) -> Result<(f32, Gradients, usize)> {
    if !model.ends_in_softmax() {
        return Err(Error::ShapeMismatch(
            "training requires a model ending in softmax".into(),
        ));
    }
    if label >= model.class_count() {
        return Err(Error::RangeError(format!(
            "label {label} outside 0..{}",
            model.class_count()
        )));
    }
    let trace = forward_trace(model, input)?;
    let layers = model.layers();
    let n = layers.len();
    let scores = &trace.activations[n - 1];
    let probs = trace.output().data();

    let max = scores.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + scores.data().iter().map(|&z| (z - max).exp()).sum::<f32>().ln();
    let loss = lse - scores.data()[label];
    let predicted = crate::nn::argmax(probs);

    let mut grad: Vec<f32> = probs.to_vec();
    grad[label] -= 1.0;
    let mut upstream = Tensor::new(scores.shape().clone(), grad)?;

    let mut grads = Gradients::zeros_like(model);
    for i in (0..n - 1).rev() {
        let x = &trace.activations[i];
        let need_input_grad = i > 0;
        upstream = match &layers[i] {
            LayerSpec::Dense(d) => {
                let g = grads.layers[i].as_mut().expect("dense has params");
                dense_backward(d, x, &upstream, g, need_input_grad)?
            }
            LayerSpec::Conv2d(c) => {
                let g = grads.layers[i].as_mut().expect("conv has params");
                conv_backward(c, x, &upstream, g, need_input_grad)?
            }
            LayerSpec::Relu => {
                let data: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(x.shape().clone(), data)?
            }
            LayerSpec::MaxPool { window, .. } => {
                let idx = trace.pool_argmax[i].as_ref().expect("max pool records argmax");
                maxpool_backward(window, x, idx, &upstream)?
            }
            LayerSpec::AvgPool { window } => avgpool_backward(window, x, &upstream)?,
            LayerSpec::Flatten => upstream.reshape(x.shape().clone())?,
            LayerSpec::Softmax => {
                let p = trace.activations[i + 1].data();
                let dot: f32 = p.iter().zip(upstream.data()).map(|(a, b)| a * b).sum();
                let data: Vec<f32> = p
                    .iter()
                    .zip(upstream.data())
                    .map(|(&pi, &gi)| pi * (gi - dot))
                    .collect();
                Tensor::new(x.shape().clone(), data)?
            }
        };
    }
    Ok((loss, grads, predicted))
}

fn dense_backward(
    d: &Dense,
    x: &Tensor,
    dy: &Tensor,
    g: &mut ParamGrad,
    need_input_grad: bool,
) -> Result<Tensor> {
    let (out_f, in_f) = (d.out_features(), d.in_features());
    let xv = x.data();
    let dyv = dy.data();
    for i in 0..out_f {
        let gi = dyv[i];
        g.bias[i] += gi;
        if gi != 0.0 {
            let row = &mut g.weights[i * in_f..(i + 1) * in_f];
            row.iter_mut().zip(xv).for_each(|(w, &v)| *w += gi * v);
        }
    }
    let mut dx = vec![0.0f32; in_f];
    if need_input_grad {
        for (row, &gi) in d.weights.data().chunks_exact(in_f).zip(dyv) {
            if gi != 0.0 {
                dx.iter_mut().zip(row).for_each(|(a, &w)| *a += gi * w);
            }
        }
    }
    Tensor::new(x.shape().clone(), dx)
}

fn crop(padded: Vec<f32>, c: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    if pad == 0 {
        return padded;
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let start = (ch * ph + y + pad) * pw + pad;
            out.extend_from_slice(&padded[start..start + w]);
        }
    }
    out
}

fn conv_backward(
    conv: &Conv2d,
    x: &Tensor,
    dy: &Tensor,
    g: &mut ParamGrad,
    need_input_grad: bool,
) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (oc_n, oh, ow) = dy.chw()?;
    let (kh, kw) = conv.kernel();
    let s = conv.stride;
    let pad = conv.padding;
    let xp = pad2d(x, pad)?;
    let (_, ph, pw) = xp.chw()?;
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
    let cols = im2col(xp.data(), &geo);
    let k = geo.patch_len();
    let pixels = oh * ow;
    let wts = conv.weights.data();
    let dyv = dy.data();
    let mut dcols = if need_input_grad {
        vec![0.0f32; cols.len()]
    } else {
        Vec::new()
    };
    for oc in 0..oc_n {
        let dplane = &dyv[oc * pixels..(oc + 1) * pixels];
        g.bias[oc] += dplane.iter().sum::<f32>();
        let gw = &mut g.weights[oc * k..(oc + 1) * k];
        let w_row = &wts[oc * k..(oc + 1) * k];
        for (pix, &d) in dplane.iter().enumerate() {
            // ReLU and max-pool routing leave most upstream gradients at zero.
            if d == 0.0 {
                continue;
            }
            axpy(d, &cols[pix * k..(pix + 1) * k], gw);
            if need_input_grad {
                axpy(d, w_row, &mut dcols[pix * k..(pix + 1) * k]);
            }
        }
    }
    let dx = if need_input_grad {
        crop(col2im(&dcols, &geo), c, h, w, pad)
    } else {
        vec![0.0; c * h * w]
    };
    Tensor::new(x.shape().clone(), dx)
}

fn maxpool_backward(window: &PoolWindow, x: &Tensor, argmax: &[usize], dy: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (_, oh, ow) = dy.chw()?;
    let pad = window.padding;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut dxp = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for o in 0..oh * ow {
            let k = ch * oh * ow + o;
            dxp[ch * ph * pw + argmax[k]] += dy.data()[k];
        }
    }
    Tensor::new(x.shape().clone(), crop(dxp, c, h, w, pad))
}

fn avgpool_backward(window: &PoolWindow, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let (_, oh, ow) = dy.chw()?;
    let pad = window.padding;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let share = 1.0 / (window.kernel_h * window.kernel_w) as f32;
    let mut dxp = vec![0.0f32; c * ph * pw];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy.data()[(ch * oh + oy) * ow + ox] * share;
                for y in oy * window.stride..oy * window.stride + window.kernel_h {
                    let start = ch * ph * pw + y * pw + ox * window.stride;
                    dxp[start..start + window.kernel_w]
                        .iter_mut()
                        .for_each(|v| *v += g);
                }
            }
        }
    }
    Tensor::new(x.shape().clone(), crop(dxp, c, h, w, pad))
}
