//! Labelled image sets and the seeded synthetic generator used for desk-scale runs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Inputs with class labels in `0..class_count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDataset", into = "RawDataset")]
pub struct LabeledDataset {
    class_count: usize,
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    class_count: usize,
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
}

impl TryFrom<RawDataset> for LabeledDataset {
    type Error = Error;

    fn try_from(raw: RawDataset) -> Result<Self> {
        LabeledDataset::new(raw.class_count, raw.inputs, raw.labels)
    }
}

impl From<LabeledDataset> for RawDataset {
    fn from(d: LabeledDataset) -> Self {
        RawDataset {
            class_count: d.class_count,
            inputs: d.inputs,
            labels: d.labels,
        }
    }
}

impl LabeledDataset {
    pub fn new(class_count: usize, inputs: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::LengthError {
                expected: inputs.len(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::RangeError(format!(
                "label {bad} outside 0..{class_count}"
            )));
        }
        Ok(LabeledDataset {
            class_count,
            inputs,
            labels,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn get(&self, i: usize) -> (&Tensor, usize) {
        (&self.inputs[i], self.labels[i])
    }

    /// Inputs grouped by class, preserving dataset order within each class.
    pub fn by_class(&self) -> Vec<Vec<Tensor>> {
        let mut groups = vec![Vec::new(); self.class_count];
        for (x, &l) in self.inputs.iter().zip(&self.labels) {
            groups[l].push(x.clone());
        }
        groups
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            class_count: self.class_count,
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.class_count != other.class_count {
            return Err(Error::ShapeMismatch(format!(
                "class counts differ: {} vs {}",
                self.class_count, other.class_count
            )));
        }
        let mut out = self.clone();
        out.inputs.extend(other.inputs.iter().cloned());
        out.labels.extend(&other.labels);
        Ok(out)
    }

    /// Splits off the first `per_class` examples of every class; the rest form the second set.
    pub fn split_per_class(&self, per_class: usize) -> (LabeledDataset, LabeledDataset) {
        let mut seen = vec![0usize; self.class_count];
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for (i, &l) in self.labels.iter().enumerate() {
            if seen[l] < per_class {
                first.push(i);
            } else {
                second.push(i);
            }
            seen[l] += 1;
        }
        (self.subset(&first), self.subset(&second))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Parameters of the synthetic image generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// The image is cut into `grid x grid` tiles.
    pub grid: usize,
    /// Textured tiles of each class, row-major tile indices.
    pub layouts: Vec<Vec<usize>>,
    /// Mean of the Gaussian texture inside textured tiles.
    pub texture_mean: f32,
    /// Std of the Gaussian texture inside textured tiles.
    pub texture_std: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 10,
            per_class: 40,
            channels: 3,
            height: 16,
            width: 16,
            grid: 4,
            layouts: DEFAULT_LAYOUTS.iter().map(|l| l.to_vec()).collect(),
            texture_mean: 1.0,
            texture_std: 1.0,
        }
    }
}

/// Ten 4x4 layouts of similar textured area whose branchy max-pool work under
/// the custom CNN is spread roughly evenly across classes.
const DEFAULT_LAYOUTS: [&[usize]; 10] = [
    &[2, 4, 5, 8, 12],
    &[0, 2, 4, 9],
    &[1, 4, 7, 8],
    &[1, 13, 14],
    &[0, 3, 5, 15],
    &[1, 5, 6, 7, 8],
    &[0, 9, 13, 15],
    &[2, 4, 5, 11],
    &[2, 3, 4, 14],
    &[1, 5, 8, 14, 15],
];

impl SyntheticConfig {
    pub fn input_shape(&self) -> Result<Shape> {
        Shape::new(vec![self.channels, self.height, self.width])
    }

    fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.per_class == 0 {
            return Err(Error::InvalidConfig(
                "synthetic classes and per_class must be positive".into(),
            ));
        }
        if self.grid == 0 || self.grid > self.height || self.grid > self.width {
            return Err(Error::InvalidConfig(format!(
                "grid {} must lie in 1..=min(height, width)",
                self.grid
            )));
        }
        if self.layouts.len() != self.classes {
            return Err(Error::InvalidConfig(format!(
                "{} layouts for {} classes",
                self.layouts.len(),
                self.classes
            )));
        }
        let tiles = self.grid * self.grid;
        if let Some(bad) = self.layouts.iter().flatten().find(|&&t| t >= tiles) {
            return Err(Error::InvalidConfig(format!(
                "layout tile {bad} outside 0..{tiles}"
            )));
        }
        if !(self.texture_std.is_finite() && self.texture_std > 0.0 && self.texture_mean.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "texture_std must be finite and > 0 and texture_mean finite, got {} and {}",
                self.texture_std, self.texture_mean
            )));
        }
        Ok(())
    }
}

/// Class `c` images carry Gaussian texture on the tiles of `layouts[c]` and
/// are flat zero elsewhere. Flat pooling windows cost one update under any
/// weights and textured ones more, so the layouts set each class's branchy
/// max-pool work.
///
/// Examples are emitted class-interleaved: index `i` has label `i % classes`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<LabeledDataset> {
    cfg.validate()?;
    let shape = cfg.input_shape()?;
    let (h, w, g) = (cfg.height, cfg.width, cfg.grid);
    let masks: Vec<Vec<bool>> = cfg
        .layouts
        .iter()
        .map(|tiles| {
            (0..h * w)
                .map(|i| tiles.contains(&((i / w) * g / h * g + (i % w) * g / w)))
                .collect()
        })
        .collect();
    let texture = Normal::new(cfg.texture_mean, cfg.texture_std).expect("validated std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(cfg.classes * cfg.per_class);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for _ in 0..cfg.per_class {
        for (class, mask) in masks.iter().enumerate() {
            let mut data = vec![0.0f32; shape.len()];
            for plane in data.chunks_mut(h * w) {
                for (v, &on) in plane.iter_mut().zip(mask) {
                    if on {
                        *v = texture.sample(&mut rng);
                    }
                }
            }
            inputs.push(Tensor::new(shape.clone(), data)?);
            labels.push(class);
        }
    }
    LabeledDataset::new(cfg.classes, inputs, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_interleaved() {
        let cfg = SyntheticConfig {
            per_class: 3,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, 9).unwrap();
        let b = generate_synthetic(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert_eq!(&a.labels()[..12], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 0, 1]);
        assert!(a.inputs().iter().all(|x| x.dims() == [3, 16, 16]));
        assert!(a.inputs().iter().flat_map(|x| x.data()).all(|v| v.is_finite()));
    }

    #[test]
    fn dataset_validation() {
        let x = Tensor::from_dims(&[1], vec![0.0]).unwrap();
        assert!(LabeledDataset::new(2, vec![x.clone()], vec![2]).is_err());
        assert!(LabeledDataset::new(2, vec![x.clone()], vec![]).is_err());
        let d = LabeledDataset::new(2, vec![x.clone(), x], vec![1, 0]).unwrap();
        let groups = d.by_class();
        assert_eq!(groups[0].len(), 1);
        assert_eq!(groups[1].len(), 1);
    }

    #[test]
    fn split_per_class_counts() {
        let cfg = SyntheticConfig {
            classes: 3,
            per_class: 5,
            height: 4,
            width: 4,
            layouts: vec![vec![0], vec![1, 2], vec![]],
            ..Default::default()
        };
        let d = generate_synthetic(&cfg, 1).unwrap();
        let (a, b) = d.split_per_class(2);
        assert_eq!(a.len(), 6);
        assert_eq!(b.len(), 9);
        assert_eq!(a.concat(&b).unwrap().len(), 15);
    }
}
