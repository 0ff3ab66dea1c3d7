//! Central finite differences against an independent f64 forward pass.
//!
//! The f64 pass resolves gradients far below f32 round-off. Parameters whose
//! step flips a ReLU sign or a max-pool selection sit on a kink of the loss and
//! are skipped.

use poolleak_core::nn::{Conv2d, Dense};
use poolleak_core::trainer::example_gradients;
use poolleak_core::{LayerSpec, ModelSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-2;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-4;

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f32) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::from_dims(dims, (0..n).map(|_| rng.random_range(-scale..scale)).collect::<Vec<_>>()).unwrap()
}

pub fn conv(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> LayerSpec {
    LayerSpec::Conv2d(Conv2d {
        weights: random_tensor(rng, &[out, inp, 3, 3], 0.5),
        bias: (0..out).map(|_| rng.random_range(-0.1..0.1)).collect(),
        stride: 1,
        padding: 1,
    })
}

pub fn dense(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> LayerSpec {
    LayerSpec::Dense(Dense {
        weights: random_tensor(rng, &[out, inp], 0.5),
        bias: (0..out).map(|_| rng.random_range(-0.1..0.1)).collect(),
    })
}

/// Activation with its `C x H x W` extent; flat vectors use `(n, 1, 1)`.
pub struct Act {
    v: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
}

/// Loss plus the branch pattern (ReLU signs, max-pool picks) of one f64 pass.
pub fn forward64(layers: &[LayerSpec], params: &[(Vec<f64>, Vec<f64>)], x: &Tensor, label: usize) -> (f64, Vec<usize>) {
    let d = x.dims();
    let (c, h, w) = if d.len() == 3 { (d[0], d[1], d[2]) } else { (x.len(), 1, 1) };
    let mut a = Act {
        v: x.data().iter().map(|&v| v as f64).collect(),
        c,
        h,
        w,
    };
    let mut pattern = Vec::new();
    for (layer, (wts, bias)) in layers.iter().zip(params) {
        a = match layer {
            LayerSpec::Conv2d(cv) => {
                let (oc, kh, kw) = (cv.out_channels(), cv.kernel().0, cv.kernel().1);
                let (s, p) = (cv.stride, cv.padding as isize);
                let oh = (a.h + 2 * cv.padding - kh) / s + 1;
                let ow = (a.w + 2 * cv.padding - kw) / s + 1;
                let mut v = vec![0.0; oc * oh * ow];
                for o in 0..oc {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias[o];
                            for ci in 0..a.c {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let y = (oy * s + dy) as isize - p;
                                        let xx = (ox * s + dx) as isize - p;
                                        if y < 0 || xx < 0 || y >= a.h as isize || xx >= a.w as isize {
                                            continue;
                                        }
                                        acc += wts[((o * a.c + ci) * kh + dy) * kw + dx]
                                            * a.v[(ci * a.h + y as usize) * a.w + xx as usize];
                                    }
                                }
                            }
                            v[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                Act { v, c: oc, h: oh, w: ow }
            }
            LayerSpec::Relu => {
                pattern.extend(a.v.iter().map(|&v| (v > 0.0) as usize));
                Act {
                    v: a.v.iter().map(|&v| v.max(0.0)).collect(),
                    ..a
                }
            }
            LayerSpec::MaxPool { window, .. } | LayerSpec::AvgPool { window } => {
                let is_max = matches!(layer, LayerSpec::MaxPool { .. });
                let (k, s, p) = (window.kernel_h, window.stride, window.padding);
                let (ph, pw) = (a.h + 2 * p, a.w + 2 * p);
                let (oh, ow) = ((ph - k) / s + 1, (pw - k) / s + 1);
                let at = |ci: usize, y: usize, xx: usize| -> f64 {
                    if y < p || xx < p || y >= a.h + p || xx >= a.w + p {
                        0.0
                    } else {
                        a.v[(ci * a.h + y - p) * a.w + xx - p]
                    }
                };
                let mut v = vec![0.0; a.c * oh * ow];
                for ci in 0..a.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (mut best, mut pick, mut sum) = (f64::NEG_INFINITY, 0, 0.0);
                            for dy in 0..k {
                                for dx in 0..k {
                                    let val = at(ci, oy * s + dy, ox * s + dx);
                                    sum += val;
                                    if val > best {
                                        best = val;
                                        pick = dy * k + dx;
                                    }
                                }
                            }
                            v[(ci * oh + oy) * ow + ox] = if is_max { best } else { sum / (k * k) as f64 };
                            if is_max {
                                pattern.push(pick);
                            }
                        }
                    }
                }
                Act { v, c: a.c, h: oh, w: ow }
            }
            LayerSpec::Flatten => Act {
                c: a.v.len(),
                h: 1,
                w: 1,
                ..a
            },
            LayerSpec::Dense(dn) => {
                let inp = dn.in_features();
                let v: Vec<f64> = (0..dn.out_features())
                    .map(|o| bias[o] + (0..inp).map(|j| wts[o * inp + j] * a.v[j]).sum::<f64>())
                    .collect();
                Act { c: v.len(), v, h: 1, w: 1 }
            }
            LayerSpec::Softmax => {
                let max = a.v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + a.v.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                return (lse - a.v[label], pattern);
            }
        };
    }
    unreachable!("models under test end in softmax")
}

pub fn params64(model: &ModelSpec) -> Vec<(Vec<f64>, Vec<f64>)> {
    let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    model
        .layers()
        .iter()
        .map(|l| match l {
            LayerSpec::Conv2d(c) => (widen(c.weights.data()), widen(&c.bias)),
            LayerSpec::Dense(d) => (widen(d.weights.data()), widen(&d.bias)),
            _ => (Vec::new(), Vec::new()),
        })
        .collect()
}

/// Worst per-parameter relative error over the probed parameters, and how
/// many probes were compared.
pub fn worst_relative_error(model: &ModelSpec, x: &Tensor, label: usize, sample: Option<(usize, u64)>) -> (f64, usize) {
    let (_, grads, _) = example_gradients(model, x, label).unwrap();
    let base = params64(model);
    let (_, pattern) = forward64(model.layers(), &base, x, label);
    let mut probes: Vec<(usize, bool, usize)> = Vec::new();
    for (li, (w, b)) in base.iter().enumerate() {
        probes.extend((0..w.len()).map(|i| (li, false, i)));
        probes.extend((0..b.len()).map(|i| (li, true, i)));
    }
    if let Some((n, seed)) = sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        probes = (0..n).map(|_| probes[rng.random_range(0..probes.len())]).collect();
    }
    let (mut worst, mut compared) = (0.0f64, 0usize);
    for (li, is_bias, i) in probes {
        let g = grads.layers[li].as_ref().expect("parameterised layer has a gradient");
        let analytic = if is_bias { g.bias[i] } else { g.weights[i] } as f64;
        let shifted = |delta: f64| {
            let mut p = base.clone();
            let slot = if is_bias { &mut p[li].1 } else { &mut p[li].0 };
            slot[i] += delta;
            forward64(model.layers(), &p, x, label)
        };
        let (up, up_pattern) = shifted(H);
        let (down, down_pattern) = shifted(-H);
        if up_pattern != pattern || down_pattern != pattern {
            continue;
        }
        let numeric = (up - down) / (2.0 * H);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(rel);
        compared += 1;
    }
    (worst, compared)
}
