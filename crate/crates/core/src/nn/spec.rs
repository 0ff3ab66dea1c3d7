use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Which max-pool kernel a layer runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolVariant {
    /// Conditional update: the max/index assignment only runs when a larger value is seen.
    NaiveBranchy,
    /// Unconditional select through a two-slot array; the assignment runs for every element.
    ConstantTime,
}

impl PoolVariant {
    pub fn label(self) -> &'static str {
        match self {
            PoolVariant::NaiveBranchy => "naive",
            PoolVariant::ConstantTime => "ct",
        }
    }
}

impl std::str::FromStr for PoolVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" | "naive_branchy" => Ok(PoolVariant::NaiveBranchy),
            "ct" | "constant_time" => Ok(PoolVariant::ConstantTime),
            other => Err(Error::InvalidConfig(format!("unknown pool variant `{other}`"))),
        }
    }
}

/// Window geometry shared by both pooling kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolWindow {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolWindow {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        PoolWindow {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    fn check(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::ShapeError(format!(
                "pool kernel and stride must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Output `(H, W)` for an `h x w` input plane.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.check()?;
        output_extent(h, self.kernel_h, self.stride, self.padding)
            .zip(output_extent(w, self.kernel_w, self.stride, self.padding))
            .ok_or_else(|| {
                Error::ShapeError(format!(
                    "{}x{} window does not fit {h}x{w} input with padding {}",
                    self.kernel_h, self.kernel_w, self.padding
                ))
            })
    }
}

pub(crate) fn output_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2d {
    /// `out_channels x in_channels x kh x kw`
    pub weights: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        let d = self.weights.dims();
        (d[2], d[3])
    }

    fn check(&self) -> Result<()> {
        if self.weights.dims().len() != 4 {
            return Err(Error::ShapeError(format!(
                "conv weights must be rank 4, got {}",
                self.weights.shape()
            )));
        }
        if self.bias.len() != self.out_channels() {
            return Err(Error::ShapeError(format!(
                "conv bias length {} != out channels {}",
                self.bias.len(),
                self.out_channels()
            )));
        }
        if self.stride == 0 {
            return Err(Error::ShapeError("conv stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dense {
    /// `out_features x in_features`
    pub weights: Tensor,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn out_features(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weights.dims()[1]
    }

    fn check(&self) -> Result<()> {
        if self.weights.dims().len() != 2 {
            return Err(Error::ShapeError(format!(
                "dense weights must be rank 2, got {}",
                self.weights.shape()
            )));
        }
        if self.bias.len() != self.out_features() {
            return Err(Error::ShapeError(format!(
                "dense bias length {} != out features {}",
                self.bias.len(),
                self.out_features()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d(Conv2d),
    Relu,
    MaxPool {
        window: PoolWindow,
        variant: PoolVariant,
    },
    AvgPool {
        window: PoolWindow,
    },
    Flatten,
    /// Flattens any input row-major before the affine map.
    Dense(Dense),
    Softmax,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d(_) => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d(_) | LayerSpec::Dense(_))
    }

    /// Output shape for `input`, validating parameters against it.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let chw = || match *input.dims() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::ShapeError(format!(
                "{} expects a CxHxW input, got {input}",
                self.kind_name()
            ))),
        };
        match self {
            LayerSpec::Conv2d(conv) => {
                conv.check()?;
                let (c, h, w) = chw()?;
                if c != conv.in_channels() {
                    return Err(Error::ShapeError(format!(
                        "conv expects {} input channels, got {c}",
                        conv.in_channels()
                    )));
                }
                let (kh, kw) = conv.kernel();
                let oh = output_extent(h, kh, conv.stride, conv.padding);
                let ow = output_extent(w, kw, conv.stride, conv.padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => Shape::new(vec![conv.out_channels(), oh, ow]),
                    _ => Err(Error::ShapeError(format!(
                        "{kh}x{kw} conv kernel does not fit {h}x{w} input"
                    ))),
                }
            }
            LayerSpec::MaxPool { window, .. } | LayerSpec::AvgPool { window } => {
                let (c, h, w) = chw()?;
                let (oh, ow) = window.output_hw(h, w)?;
                Shape::new(vec![c, oh, ow])
            }
            LayerSpec::Relu => Ok(input.clone()),
            LayerSpec::Flatten => Shape::new(vec![input.len()]),
            LayerSpec::Dense(dense) => {
                dense.check()?;
                if input.len() != dense.in_features() {
                    return Err(Error::ShapeError(format!(
                        "dense expects {} features, got {}",
                        dense.in_features(),
                        input.len()
                    )));
                }
                Shape::new(vec![dense.out_features()])
            }
            LayerSpec::Softmax => {
                if input.rank() != 1 {
                    return Err(Error::ShapeError(format!(
                        "softmax expects a flat input, got {input}"
                    )));
                }
                Ok(input.clone())
            }
        }
    }
}

/// A validated network: every layer shape-checks and the output has `class_count` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel", into = "RawModel")]
pub struct ModelSpec {
    input_shape: Shape,
    class_count: usize,
    layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    input_shape: Shape,
    class_count: usize,
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawModel> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        ModelSpec::new(raw.input_shape, raw.class_count, raw.layers)
    }
}

impl From<ModelSpec> for RawModel {
    fn from(m: ModelSpec) -> Self {
        RawModel {
            input_shape: m.input_shape,
            class_count: m.class_count,
            layers: m.layers,
        }
    }
}

impl ModelSpec {
    pub fn new(input_shape: Shape, class_count: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::ShapeError("class_count must be positive".into()));
        }
        let model = ModelSpec {
            input_shape,
            class_count,
            layers,
        };
        let shapes = model.layer_shapes()?;
        let out = shapes.last().unwrap_or(&model.input_shape);
        if out.len() != class_count {
            return Err(Error::ShapeError(format!(
                "model output has {} entries, expected {class_count}",
                out.len()
            )));
        }
        Ok(model)
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    /// Output shape of every layer, in order.
    pub fn layer_shapes(&self) -> Result<Vec<Shape>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(&shape)
                .map_err(|e| Error::ShapeError(format!("layer {i} ({}): {e}", layer.kind_name())))?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn max_pool_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::MaxPool { .. }))
            .count()
    }

    /// Copy of the model with every max-pool layer switched to `variant`.
    pub fn with_pool_variant(&self, variant: PoolVariant) -> ModelSpec {
        let mut m = self.clone();
        for layer in &mut m.layers {
            if let LayerSpec::MaxPool { variant: v, .. } = layer {
                *v = variant;
            }
        }
        m
    }

    /// Copy of the model with every max-pool layer replaced by an average pool of the same geometry.
    pub fn with_avg_pooling(&self) -> ModelSpec {
        let mut m = self.clone();
        for layer in &mut m.layers {
            if let LayerSpec::MaxPool { window, .. } = layer {
                *layer = LayerSpec::AvgPool { window: *window };
            }
        }
        m
    }

    pub fn ends_in_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Softmax))
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv2d(c) => c.weights.len() + c.bias.len(),
                LayerSpec::Dense(d) => d.weights.len() + d.bias.len(),
                _ => 0,
            })
            .sum()
    }
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    model: ModelSpec,
}

impl ModelSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format_version {} (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            )));
        }
        Ok(file.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ModelSpec::from_json(&std::fs::read_to_string(path)?)
    }
}
