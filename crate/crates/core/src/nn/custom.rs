//! The reference CNN: six 3x3 convolutions, two 3x3/stride-2 max pools and
//! three dense layers, with a ReLU after every hidden convolution and dense layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Shape, Tensor};

use super::spec::{Conv2d, Dense, LayerSpec, ModelSpec, PoolVariant, PoolWindow};

const CONV_WIDTHS: [usize; 6] = [16, 32, 32, 32, 64, 128];
const DENSE_WIDTHS: [usize; 2] = [128, 64];
const POOL_AFTER_CONV: [usize; 2] = [1, 3];

/// Max-pool geometry of the reference network.
pub const CUSTOM_POOL: PoolWindow = PoolWindow {
    kernel_h: 3,
    kernel_w: 3,
    stride: 2,
    padding: 0,
};

/// He-uniform initialisation, biases zero.
fn he_uniform(rng: &mut ChaCha8Rng, dims: &[usize], fan_in: usize) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n: usize = dims.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_dims(dims, data)
}

/// Builds the reference network for `input_shape` (`C x H x W`).
///
/// Weights are a pure function of `seed`. Fails with a shape error when the
/// input is too small to survive both pools.
pub fn build_custom_cnn(input_shape: &Shape, class_count: usize, seed: u64) -> Result<ModelSpec> {
    build_custom_cnn_with(input_shape, class_count, seed, PoolVariant::NaiveBranchy)
}

pub fn build_custom_cnn_with(
    input_shape: &Shape,
    class_count: usize,
    seed: u64,
    variant: PoolVariant,
) -> Result<ModelSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut in_ch = *input_shape.dims().first().unwrap_or(&1);
    for (i, &out_ch) in CONV_WIDTHS.iter().enumerate() {
        layers.push(LayerSpec::Conv2d(Conv2d {
            weights: he_uniform(&mut rng, &[out_ch, in_ch, 3, 3], in_ch * 9)?,
            bias: vec![0.0; out_ch],
            stride: 1,
            padding: 1,
        }));
        layers.push(LayerSpec::Relu);
        if POOL_AFTER_CONV.contains(&i) {
            layers.push(LayerSpec::MaxPool {
                window: CUSTOM_POOL,
                variant,
            });
        }
        in_ch = out_ch;
    }

    // The dense widths depend on the trunk's output size, so the trunk is
    // shape-checked on its own first.
    let mut shape = input_shape.clone();
    for layer in &layers {
        shape = layer.output_shape(&shape)?;
    }

    let mut features = shape.len();
    for &width in &DENSE_WIDTHS {
        layers.push(LayerSpec::Dense(Dense {
            weights: he_uniform(&mut rng, &[width, features], features)?,
            bias: vec![0.0; width],
        }));
        layers.push(LayerSpec::Relu);
        features = width;
    }
    layers.push(LayerSpec::Dense(Dense {
        weights: he_uniform(&mut rng, &[class_count, features], features)?,
        bias: vec![0.0; class_count],
    }));
    layers.push(LayerSpec::Softmax);
    ModelSpec::new(input_shape.clone(), class_count, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::nn::model_forward;

    #[test]
    fn cifar_geometry_shape_checks() {
        let shape = Shape::new(vec![3, 32, 32]).unwrap();
        let m = build_custom_cnn(&shape, 10, 0).unwrap();
        assert_eq!(m.layers().len(), 20);
        assert_eq!(m.max_pool_count(), 2);
        let kinds: Vec<&str> = m.layers().iter().map(|l| l.kind_name()).collect();
        assert_eq!(
            kinds,
            [
                "conv2d", "relu", "conv2d", "relu", "max_pool", "conv2d", "relu", "conv2d",
                "relu", "max_pool", "conv2d", "relu", "conv2d", "relu", "dense", "relu",
                "dense", "relu", "dense", "softmax"
            ]
        );
        let shapes = m.layer_shapes().unwrap();
        assert_eq!(shapes[4].dims(), &[32, 15, 15]);
        assert_eq!(shapes[9].dims(), &[32, 7, 7]);
        assert_eq!(shapes[19].dims(), &[10]);
    }

    #[test]
    fn deterministic_per_seed() {
        let shape = Shape::new(vec![3, 16, 16]).unwrap();
        let a = build_custom_cnn(&shape, 10, 7).unwrap();
        let b = build_custom_cnn(&shape, 10, 7).unwrap();
        let c = build_custom_cnn(&shape, 10, 8).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_input_underflows_second_pool() {
        let shape = Shape::new(vec![3, 4, 4]).unwrap();
        let err = build_custom_cnn(&shape, 10, 0).unwrap_err();
        assert!(matches!(err, Error::ShapeError(_)), "{err}");
    }

    #[test]
    fn instrumented_forward_has_one_time_per_layer() {
        let shape = Shape::new(vec![3, 16, 16]).unwrap();
        let m = build_custom_cnn(&shape, 10, 1).unwrap();
        let x = Tensor::filled(shape, 0.5);
        let out = model_forward(&m, &x, true).unwrap();
        assert_eq!(out.layer_times_ns.len(), m.layers().len());
        assert_eq!(out.branch_not_taken.len(), 2);
        let sum: f32 = out.logits.iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }
}
