//! Input fixtures shared by the benchmarks.

use poolleak_core::data::{generate_synthetic, SyntheticConfig};
use poolleak_core::{Shape, Tensor};

/// Values increase along the flat index, so every branchy window updates on each element.
pub fn ascending(c: usize, h: usize, w: usize) -> Tensor {
    let n = c * h * w;
    Tensor::from_dims(&[c, h, w], (0..n).map(|i| i as f32).collect::<Vec<f32>>()).expect("dims match data")
}

/// Values decrease along the flat index, so branchy windows update rarely.
pub fn descending(c: usize, h: usize, w: usize) -> Tensor {
    let n = c * h * w;
    Tensor::from_dims(&[c, h, w], (0..n).map(|i| (n - i) as f32).collect::<Vec<f32>>()).expect("dims match data")
}

/// Default synthetic images: 3x16x16, one per class.
pub fn synthetic_images() -> (Shape, Vec<Tensor>) {
    let cfg = SyntheticConfig {
        per_class: 1,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic(&cfg, 0).expect("default config is valid");
    (cfg.input_shape().expect("valid shape"), data.inputs().to_vec())
}
