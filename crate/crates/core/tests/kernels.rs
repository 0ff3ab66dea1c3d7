//! Forward kernels against direct loop oracles, and the pooling invariants.

use poolleak_core::nn::{
    avgpool_forward, conv2d_forward, dense_forward, maxpool_forward, Conv2d, Dense, PoolVariant,
    PoolWindow,
};
use poolleak_core::{pad2d, Shape, Tensor};
use proptest::prelude::*;

fn tensor(dims: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::from_dims(dims, data).unwrap()
}

/// `(c, h, w, kernel, stride, padding)` with the window fitting the padded plane.
fn pool_geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize)> {
    (1usize..=3, 1usize..=9, 1usize..=9, 1usize..=4, 1usize..=3, 0usize..=1)
        .prop_filter("window fits", |&(_, h, w, k, _, p)| h + 2 * p >= k && w + 2 * p >= k)
}

fn finite_values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-100.0f32..100.0, n)
}

fn oracle_maxpool(x: &Tensor, win: &PoolWindow) -> (Vec<f32>, u64, u64) {
    let (c, h, w) = x.chw().unwrap();
    let xp = pad2d(x, win.padding).unwrap();
    let (ph, pw) = (h + 2 * win.padding, w + 2 * win.padding);
    let oh = (ph - win.kernel_h) / win.stride + 1;
    let ow = (pw - win.kernel_w) / win.stride + 1;
    let mut out = Vec::new();
    let (mut lo, mut hi) = (0u64, 0u64);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::new();
                for dy in 0..win.kernel_h {
                    for dx in 0..win.kernel_w {
                        vals.push(xp.at(&[ch, oy * win.stride + dy, ox * win.stride + dx]).unwrap());
                    }
                }
                out.push(vals.iter().copied().fold(f32::NEG_INFINITY, f32::max));
                // running-maximum records: the first element always counts
                let mut best = f32::NEG_INFINITY;
                for v in vals {
                    if v > best {
                        best = v;
                        lo += 1;
                    }
                }
                hi += (win.kernel_h * win.kernel_w) as u64;
            }
        }
    }
    (out, lo, hi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pad_preserves_interior_and_zeroes_border(
        (c, h, w) in (1usize..=3, 1usize..=6, 1usize..=6),
        pad in 0usize..=3,
        seed in any::<u64>(),
    ) {
        let data: Vec<f32> = (0..c * h * w).map(|i| (seed.wrapping_add(i as u64) % 97) as f32 - 48.0).collect();
        let x = tensor(&[c, h, w], data);
        let p = pad2d(&x, pad).unwrap();
        prop_assert_eq!(p.dims(), &[c, h + 2 * pad, w + 2 * pad][..]);
        for ch in 0..c {
            for y in 0..h + 2 * pad {
                for xx in 0..w + 2 * pad {
                    let v = p.at(&[ch, y, xx]).unwrap();
                    let inside = y >= pad && y < h + pad && xx >= pad && xx < w + pad;
                    if inside {
                        prop_assert_eq!(v, x.at(&[ch, y - pad, xx - pad]).unwrap());
                    } else {
                        prop_assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn at_matches_row_major_offset(dims in prop::collection::vec(1usize..=4, 1..=4)) {
        let n: usize = dims.iter().product();
        let t = tensor(&dims, (0..n).map(|i| i as f32).collect());
        let mut coords = vec![0usize; dims.len()];
        for flat in 0..n {
            prop_assert_eq!(t.at(&coords).unwrap(), flat as f32);
            for d in (0..dims.len()).rev() {
                coords[d] += 1;
                if coords[d] < dims[d] {
                    break;
                }
                coords[d] = 0;
            }
        }
    }

    #[test]
    fn tensor_json_round_trip(dims in prop::collection::vec(1usize..=3, 1..=4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff) * 0.5).collect();
        let t = tensor(&dims, data);
        let back = Tensor::from_json(&t.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn pool_variants_agree_on_nan_free_input(
        (geo, data) in pool_geometry().prop_flat_map(|g| (Just(g), finite_values(g.0 * g.1 * g.2)))
    ) {
        let (c, h, w, k, s, p) = geo;
        let x = tensor(&[c, h, w], data);
        let win = PoolWindow::square(k, s, p);
        let naive = maxpool_forward(&x, &win, PoolVariant::NaiveBranchy).unwrap();
        let ct = maxpool_forward(&x, &win, PoolVariant::ConstantTime).unwrap();
        prop_assert_eq!(&naive.output, &ct.output);
        prop_assert_eq!(&naive.argmax, &ct.argmax);
    }

    #[test]
    fn maxpool_matches_oracle_and_count_bounds(
        (geo, data) in pool_geometry().prop_flat_map(|g| (Just(g), finite_values(g.0 * g.1 * g.2)))
    ) {
        let (c, h, w, k, s, p) = geo;
        let x = tensor(&[c, h, w], data);
        let win = PoolWindow::square(k, s, p);
        let (expected, records, total) = oracle_maxpool(&x, &win);
        let naive = maxpool_forward(&x, &win, PoolVariant::NaiveBranchy).unwrap();
        prop_assert_eq!(naive.output.data(), &expected[..]);
        prop_assert_eq!(naive.update_count, records);
        let windows = naive.output.len() as u64;
        prop_assert!(windows <= naive.update_count && naive.update_count <= total);
        let ct = maxpool_forward(&x, &win, PoolVariant::ConstantTime).unwrap();
        prop_assert_eq!(ct.update_count, total);
    }

    #[test]
    fn ct_count_ignores_values(
        geo in pool_geometry(),
        a in any::<u64>(),
        b in any::<u64>(),
    ) {
        let (c, h, w, k, s, p) = geo;
        let fill = |seed: u64| -> Tensor {
            let data = (0..c * h * w)
                .map(|i| ((seed ^ (i as u64).wrapping_mul(0x9e37_79b9)) % 1000) as f32 / 7.0)
                .collect::<Vec<_>>();
            tensor(&[c, h, w], data)
        };
        let win = PoolWindow::square(k, s, p);
        let ca = maxpool_forward(&fill(a), &win, PoolVariant::ConstantTime).unwrap();
        let cb = maxpool_forward(&fill(b), &win, PoolVariant::ConstantTime).unwrap();
        prop_assert_eq!(ca.update_count, cb.update_count);
        prop_assert_eq!(ca.update_count, (ca.output.len() * k * k) as u64);
    }

    #[test]
    fn conv_matches_direct_loops(
        (ic, oc, h, w, k, s, p) in (1usize..=3, 1usize..=3, 2usize..=7, 2usize..=7, 1usize..=3, 1usize..=2, 0usize..=2)
            .prop_filter("kernel fits", |&(_, _, h, w, k, _, p)| h + 2 * p >= k && w + 2 * p >= k),
        seed in any::<u64>(),
    ) {
        let val = |i: usize, salt: u64| (((seed ^ salt).wrapping_add(i as u64 * 0x9e37_79b9) >> 7) % 401) as f32 / 100.0 - 2.0;
        let x = tensor(&[ic, h, w], (0..ic * h * w).map(|i| val(i, 1)).collect());
        let conv = Conv2d {
            weights: tensor(&[oc, ic, k, k], (0..oc * ic * k * k).map(|i| val(i, 2)).collect()),
            bias: (0..oc).map(|i| val(i, 3)).collect(),
            stride: s,
            padding: p,
        };
        let got = conv2d_forward(&x, &conv).unwrap();
        let (oh, ow) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
        prop_assert_eq!(got.dims(), &[oc, oh, ow][..]);
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o] as f64;
                    for c in 0..ic {
                        for dy in 0..k {
                            for dx in 0..k {
                                let (y, xx) = ((oy * s + dy) as isize - p as isize, (ox * s + dx) as isize - p as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += conv.weights.at(&[o, c, dy, dx]).unwrap() as f64
                                    * x.at(&[c, y as usize, xx as usize]).unwrap() as f64;
                            }
                        }
                    }
                    let v = got.at(&[o, oy, ox]).unwrap() as f64;
                    prop_assert!((v - acc).abs() <= 1e-4 * (1.0 + acc.abs()), "{} vs {}", v, acc);
                }
            }
        }
    }

    #[test]
    fn dense_matches_direct_sum(
        (out, inp) in (1usize..=6, 1usize..=12),
        seed in any::<u64>(),
    ) {
        let val = |i: usize, salt: u64| (((seed ^ salt).wrapping_add(i as u64 * 0x2545_f491) >> 5) % 301) as f32 / 50.0 - 3.0;
        let layer = Dense {
            weights: tensor(&[out, inp], (0..out * inp).map(|i| val(i, 7)).collect()),
            bias: (0..out).map(|i| val(i, 8)).collect(),
        };
        let x = tensor(&[inp], (0..inp).map(|i| val(i, 9)).collect());
        let got = dense_forward(&x, &layer).unwrap();
        for o in 0..out {
            let acc: f64 = layer.bias[o] as f64
                + (0..inp).map(|j| layer.weights.at(&[o, j]).unwrap() as f64 * x.data()[j] as f64).sum::<f64>();
            prop_assert!((got.data()[o] as f64 - acc).abs() <= 1e-4 * (1.0 + acc.abs()));
        }
    }

    #[test]
    fn avgpool_is_window_mean(
        (geo, data) in pool_geometry().prop_flat_map(|g| (Just(g), finite_values(g.0 * g.1 * g.2)))
    ) {
        let (c, h, w, k, s, p) = geo;
        let x = tensor(&[c, h, w], data);
        let win = PoolWindow::square(k, s, p);
        let got = avgpool_forward(&x, &win).unwrap();
        let xp = pad2d(&x, p).unwrap();
        let (_, oh, ow) = got.chw().unwrap();
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = 0.0f64;
                    for dy in 0..k {
                        for dx in 0..k {
                            sum += xp.at(&[ch, oy * s + dy, ox * s + dx]).unwrap() as f64;
                        }
                    }
                    let mean = sum / (k * k) as f64;
                    let v = got.at(&[ch, oy, ox]).unwrap() as f64;
                    prop_assert!((v - mean).abs() <= 1e-4 * (1.0 + mean.abs()));
                }
            }
        }
    }
}

#[test]
fn descending_window_takes_one_update_ascending_takes_all() {
    let win = PoolWindow::square(3, 3, 0);
    let desc = tensor(&[1, 3, 3], (0..9).rev().map(|v| v as f32).collect());
    let asc = tensor(&[1, 3, 3], (0..9).map(|v| v as f32).collect());
    assert_eq!(maxpool_forward(&desc, &win, PoolVariant::NaiveBranchy).unwrap().update_count, 1);
    assert_eq!(maxpool_forward(&asc, &win, PoolVariant::NaiveBranchy).unwrap().update_count, 9);
    assert_eq!(maxpool_forward(&desc, &win, PoolVariant::ConstantTime).unwrap().update_count, 9);
}

#[test]
fn shape_errors_are_reported() {
    let x = tensor(&[1, 2, 2], vec![0.0; 4]);
    assert!(maxpool_forward(&x, &PoolWindow::square(3, 1, 0), PoolVariant::NaiveBranchy).is_err());
    assert!(Shape::new(vec![0, 2]).is_err());
    assert!(Shape::new(vec![1, 1, 1, 1, 1]).is_err());
}
