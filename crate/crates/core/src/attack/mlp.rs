//! Feed-forward label classifier over timing feature rows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dataset::AttackDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Logistic,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Logistic => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => (a > 0.0) as u8 as f64,
            Activation::Tanh => 1.0 - a * a,
            Activation::Logistic => a * (1.0 - a),
        }
    }
}

fn default_batch_size() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MLPSpec {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl MLPSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers.contains(&0)
            || !(self.learning_rate > 0.0 && self.learning_rate.is_finite())
            || self.epochs == 0
            || self.batch_size == 0
        {
            return Err(Error::InvalidConfig(format!(
                "MLP sizes, epochs and learning rate must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// hidden {(32), (64, 32)} x activation {relu, tanh} x lr {0.01, 0.001}.
    pub fn default_space(epochs: usize, seed: u64) -> Vec<MLPSpec> {
        let mut space = Vec::new();
        for hidden in [vec![32], vec![64, 32]] {
            for activation in [Activation::Relu, Activation::Tanh] {
                for learning_rate in [0.01, 0.001] {
                    space.push(MLPSpec {
                        hidden_layers: hidden.clone(),
                        activation,
                        learning_rate,
                        epochs,
                        seed,
                        batch_size: default_batch_size(),
                    });
                }
            }
        }
        space
    }
}

/// Per-feature affine normalisation fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Feature indices kept; zero-variance features are dropped.
    pub keep: Vec<usize>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Standardizer> {
        let first = rows.first().ok_or(Error::EmptyInput)?;
        let width = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; width];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        let keep: Vec<usize> = (0..width).filter(|&i| std[i] > 0.0).collect();
        if keep.len() < width {
            let err = Error::DegenerateData(format!(
                "{} of {width} features have zero variance and were dropped",
                width - keep.len()
            ));
            log::warn!("{err}");
        }
        Ok(Standardizer { mean, std, keep })
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        self.keep
            .iter()
            .map(|&i| (row[i] - self.mean[i]) / self.std[i])
            .collect()
    }

    pub fn dropped(&self) -> usize {
        self.mean.len() - self.keep.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DenseF64 {
    inputs: usize,
    outputs: usize,
    /// Row-major `[outputs, inputs]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DenseF64 {
    fn glorot(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        DenseF64 {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MLPSpec,
    pub classes: usize,
    pub standardizer: Standardizer,
    layers: Vec<DenseF64>,
}

impl Mlp {
    /// Activations of every layer for a standardized row; the last is the softmax output.
    fn activations(&self, x: Vec<f64>) -> Vec<Vec<f64>> {
        let mut acts = vec![x];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(acts.last().expect("input present"));
            if l == last {
                softmax_in_place(&mut z);
            } else {
                z.iter_mut().for_each(|v| *v = self.spec.activation.apply(*v));
            }
            acts.push(z);
        }
        acts
    }

    pub fn predict_proba(&self, row: &[f64]) -> Vec<f64> {
        self.activations(self.standardizer.transform(row))
            .pop()
            .expect("output layer present")
    }

    /// Lowest class index wins ties; NaN outputs never win.
    pub fn predict(&self, row: &[f64]) -> usize {
        let p = self.predict_proba(row);
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        best
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Mini-batch SGD on softmax cross-entropy over standardized features.
pub fn mlp_train(train: &AttackDataset, spec: &MLPSpec) -> Result<Mlp> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    let first = train.labels[0];
    if train.labels.iter().all(|&l| l == first) {
        return Err(Error::DegenerateData(
            "classifier training needs at least 2 classes".into(),
        ));
    }
    let classes = train.header.classes;
    let standardizer = Standardizer::fit(&train.rows)?;
    let xs: Vec<Vec<f64>> = train.rows.iter().map(|r| standardizer.transform(r)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut widths = vec![standardizer.keep.len()];
    widths.extend(&spec.hidden_layers);
    widths.push(classes);
    let layers = widths
        .windows(2)
        .map(|w| DenseF64::glorot(w[0], w[1], &mut rng))
        .collect();
    let mut mlp = Mlp {
        spec: spec.clone(),
        classes,
        standardizer,
        layers,
    };

    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _ in 0..spec.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(spec.batch_size) {
            sgd_batch(&mut mlp, &xs, &train.labels, batch);
        }
    }
    Ok(mlp)
}

fn sgd_batch(mlp: &mut Mlp, xs: &[Vec<f64>], labels: &[usize], batch: &[usize]) {
    let mut gw: Vec<Vec<f64>> = mlp.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect();
    let mut gb: Vec<Vec<f64>> = mlp.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
    let act = mlp.spec.activation;
    for &i in batch {
        let acts = mlp.activations(xs[i].clone());
        let mut delta = acts.last().expect("output").clone();
        delta[labels[i]] -= 1.0;
        for l in (0..mlp.layers.len()).rev() {
            let layer = &mlp.layers[l];
            let input = &acts[l];
            for o in 0..layer.outputs {
                gb[l][o] += delta[o];
                let row = &mut gw[l][o * layer.inputs..(o + 1) * layer.inputs];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += delta[o] * x;
                }
            }
            if l > 0 {
                delta = (0..layer.inputs)
                    .map(|k| {
                        let back: f64 = (0..layer.outputs)
                            .map(|o| layer.weights[o * layer.inputs + k] * delta[o])
                            .sum();
                        back * act.derivative(input[k])
                    })
                    .collect();
            }
        }
    }
    let step = mlp.spec.learning_rate / batch.len() as f64;
    for (layer, (gw, gb)) in mlp.layers.iter_mut().zip(gw.iter().zip(&gb)) {
        for (w, g) in layer.weights.iter_mut().zip(gw) {
            *w -= step * g;
        }
        for (b, g) in layer.bias.iter_mut().zip(gb) {
            *b -= step * g;
        }
    }
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }
}

/// Accuracy equals `trace / total` of the returned matrix.
pub fn evaluate(model: &Mlp, test: &AttackDataset) -> Result<(f64, ConfusionMatrix)> {
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut cm = ConfusionMatrix::new(model.classes.max(test.header.classes));
    for (row, &label) in test.rows.iter().zip(&test.labels) {
        cm.counts[label][model.predict(row)] += 1;
    }
    Ok((cm.accuracy(), cm))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: MLPSpec,
    pub best_index: usize,
    /// Mean validation accuracy of each candidate, aligned with the space.
    pub scores: Vec<f64>,
}

/// Stratified `k`-fold selection; the earliest candidate wins ties.
pub fn grid_search(train: &AttackDataset, space: &[MLPSpec], k: usize, seed: u64) -> Result<GridResult> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("K-fold needs K >= 2, got {k}")));
    }
    if space.is_empty() {
        return Err(Error::InvalidConfig("grid-search space is empty".into()));
    }
    let folds = stratified_folds(&train.labels, train.header.classes, k, seed);
    let mut scores = Vec::with_capacity(space.len());
    for spec in space {
        let (mut sum, mut used) = (0.0, 0usize);
        for fold in 0..k {
            let (fit_idx, val_idx): (Vec<usize>, Vec<usize>) =
                (0..train.len()).partition(|&i| folds[i] != fold);
            if val_idx.is_empty() {
                continue;
            }
            let model = mlp_train(&train.subset(&fit_idx), spec)?;
            sum += evaluate(&model, &train.subset(&val_idx))?.0;
            used += 1;
        }
        scores.push(if used == 0 { 0.0 } else { sum / used as f64 });
    }
    let mut best_index = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best_index] {
            best_index = i;
        }
    }
    Ok(GridResult {
        best: space[best_index].clone(),
        best_index,
        scores,
    })
}

/// Fold id per row; each class is dealt round-robin after a seeded shuffle.
pub fn stratified_folds(labels: &[usize], classes: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; labels.len()];
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for (pos, &i) in members.iter().enumerate() {
            folds[i] = pos % k;
        }
    }
    folds
}
