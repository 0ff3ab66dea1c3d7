//! Membership inference through the timing channel.
//!
//! A label classifier is fitted on query-set timings under a model trained
//! without the query set (S1). The same classifier is then scored on timings
//! of the same rows under a model whose training set includes the query set
//! (S2). A drop in accuracy reveals that the query set was used.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::seeds::mix;
use crate::timing::{CollectionProtocol, TimingChannel};
use crate::trainer::{train, DpConfig, TrainConfig};

use super::dataset::{build_attack_dataset, split_indices, AttackDataset};
use super::mlp::{evaluate, mlp_train, ConfusionMatrix, MLPSpec, Mlp};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Model 2 starts from the same initial weights as model 1.
    #[default]
    Scratch,
    /// Model 2 continues from model 1's trained weights.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiaConfig {
    pub train: TrainConfig,
    pub dp: DpConfig,
    pub protocol: CollectionProtocol,
    pub classifier: MLPSpec,
    pub train_fraction: f64,
    pub retrain_mode: RetrainMode,
    /// Drives input draws, the classifier split and the overlap order.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MIAResult {
    pub acc_s1: f64,
    pub acc_s2: f64,
    pub gap: f64,
}

impl MIAResult {
    fn new(acc_s1: f64, acc_s2: f64) -> Self {
        MIAResult {
            acc_s1,
            acc_s2,
            gap: acc_s1 - acc_s2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaOutcome {
    pub result: MIAResult,
    pub s1_confusion: ConfusionMatrix,
    pub s2_confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapSweepResult {
    pub baseline: f64,
    pub ratios: Vec<f64>,
    pub accuracies: Vec<f64>,
}

/// The fitted S1 stage, reused to score any later model.
pub struct S1Stage {
    pub classifier: Mlp,
    pub test_rows: Vec<usize>,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn check_disjoint(t: &LabeledDataset, q: &LabeledDataset) -> Result<()> {
    for x in q.inputs() {
        if t.inputs().iter().any(|y| y == x) {
            return Err(Error::InvalidConfig(
                "query set shares an input with the training set".into(),
            ));
        }
    }
    Ok(())
}

fn query_dataset(
    model: &ModelSpec,
    q: &LabeledDataset,
    cfg: &MiaConfig,
    channel: &mut dyn TimingChannel,
) -> Result<AttackDataset> {
    let p = &cfg.protocol;
    build_attack_dataset(
        model,
        &q.by_class(),
        p.inputs_p,
        p.reps_n,
        p.runs_m,
        p.warmup,
        channel,
        cfg.seed,
    )
}

/// Retraining number `run` (from 1) draws its own shuffle and noise streams,
/// as an independent training job would.
pub fn retrain(
    init: &ModelSpec,
    model1: &ModelSpec,
    data: &LabeledDataset,
    cfg: &MiaConfig,
    run: u64,
) -> Result<ModelSpec> {
    let start = match cfg.retrain_mode {
        RetrainMode::Scratch => init,
        RetrainMode::Finetune => model1,
    };
    let train_cfg = TrainConfig {
        seed: mix(&[cfg.train.seed, run]),
        ..cfg.train.clone()
    };
    Ok(train(start, data, &train_cfg, &cfg.dp)?.model)
}

/// Model 1 on `t`, model 2 on `t` plus `q`.
pub fn train_mia_models(
    init: &ModelSpec,
    t: &LabeledDataset,
    q: &LabeledDataset,
    cfg: &MiaConfig,
) -> Result<(ModelSpec, ModelSpec)> {
    check_disjoint(t, q)?;
    let model1 = train(init, t, &cfg.train, &cfg.dp)?.model;
    let model2 = retrain(init, &model1, &t.concat(q)?, cfg, 1)?;
    Ok((model1, model2))
}

pub fn fit_s1(
    model1: &ModelSpec,
    q: &LabeledDataset,
    cfg: &MiaConfig,
    channel: &mut dyn TimingChannel,
) -> Result<S1Stage> {
    let ds = query_dataset(model1, q, cfg, channel)?;
    let (fit_rows, test_rows) = split_indices(
        &ds.labels,
        ds.header.classes,
        cfg.train_fraction,
        mix(&[cfg.seed, 0x51]),
    )?;
    let classifier = mlp_train(&ds.subset(&fit_rows), &cfg.classifier)?;
    let (accuracy, confusion) = evaluate(&classifier, &ds.subset(&test_rows))?;
    Ok(S1Stage {
        classifier,
        test_rows,
        accuracy,
        confusion,
    })
}

/// Classifier accuracy on the S1 held-out rows re-measured under `model`.
pub fn score_model(
    stage: &S1Stage,
    model: &ModelSpec,
    q: &LabeledDataset,
    cfg: &MiaConfig,
    channel: &mut dyn TimingChannel,
) -> Result<(f64, ConfusionMatrix)> {
    let ds = query_dataset(model, q, cfg, channel)?;
    evaluate(&stage.classifier, &ds.subset(&stage.test_rows))
}

pub fn mia_evaluate(
    model1: &ModelSpec,
    model2: &ModelSpec,
    q: &LabeledDataset,
    cfg: &MiaConfig,
    channel: &mut dyn TimingChannel,
) -> Result<MiaOutcome> {
    let stage = fit_s1(model1, q, cfg, channel)?;
    let (acc_s2, s2_confusion) = score_model(&stage, model2, q, cfg, channel)?;
    Ok(MiaOutcome {
        result: MIAResult::new(stage.accuracy, acc_s2),
        s1_confusion: stage.confusion,
        s2_confusion,
    })
}

pub fn mia_run(
    init: &ModelSpec,
    t: &LabeledDataset,
    q: &LabeledDataset,
    cfg: &MiaConfig,
    channel: &mut dyn TimingChannel,
) -> Result<MiaOutcome> {
    let (model1, model2) = train_mia_models(init, t, q, cfg)?;
    mia_evaluate(&model1, &model2, q, cfg, channel)
}

/// The first `ceil(r * |q|)` query inputs under a seeded order.
pub fn overlap_subset(q: &LabeledDataset, ratio: f64, seed: u64) -> Result<LabeledDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::RangeError(format!("overlap ratio {ratio} must lie in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, 0x0f])));
    // guard against 0.3 * 100 = 30.000000000000004
    let k = ((ratio * q.len() as f64) - 1e-9).ceil() as usize;
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(q.subset(&picked))
}

/// One model per ratio, trained on `t` plus the ratio's share of `q`.
pub fn overlap_models(
    init: &ModelSpec,
    model1: &ModelSpec,
    t: &LabeledDataset,
    q: &LabeledDataset,
    ratios: &[f64],
    cfg: &MiaConfig,
) -> Result<Vec<ModelSpec>> {
    check_disjoint(t, q)?;
    ratios
        .iter()
        .zip(2u64..)
        .map(|(&r, run)| {
            let part = overlap_subset(q, r, cfg.seed)?;
            retrain(init, model1, &t.concat(&part)?, cfg, run)
        })
        .collect()
}

pub fn overlap_evaluate(
    model1: &ModelSpec,
    models: &[ModelSpec],
    ratios: &[f64],
    q: &LabeledDataset,
    cfg: &MiaConfig,
    channel: &mut dyn TimingChannel,
) -> Result<OverlapSweepResult> {
    if models.len() != ratios.len() {
        return Err(Error::LengthError {
            expected: ratios.len(),
            actual: models.len(),
        });
    }
    let stage = fit_s1(model1, q, cfg, channel)?;
    let accuracies = models
        .iter()
        .map(|m| Ok(score_model(&stage, m, q, cfg, channel)?.0))
        .collect::<Result<Vec<f64>>>()?;
    Ok(OverlapSweepResult {
        baseline: stage.accuracy,
        ratios: ratios.to_vec(),
        accuracies,
    })
}

pub fn overlap_sweep(
    init: &ModelSpec,
    t: &LabeledDataset,
    q: &LabeledDataset,
    ratios: &[f64],
    cfg: &MiaConfig,
    channel: &mut dyn TimingChannel,
) -> Result<OverlapSweepResult> {
    check_disjoint(t, q)?;
    let model1 = train(init, t, &cfg.train, &cfg.dp)?.model;
    let models = overlap_models(init, &model1, t, q, ratios, cfg)?;
    overlap_evaluate(&model1, &models, ratios, q, cfg, channel)
}

/// 0.1, 0.2, ..., 0.9.
pub fn default_ratios() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy(n: usize, offset: f32) -> LabeledDataset {
        let inputs = (0..n)
            .map(|i| Tensor::from_dims(&[1], vec![offset + i as f32]).unwrap())
            .collect();
        LabeledDataset::new(2, inputs, (0..n).map(|i| i % 2).collect()).unwrap()
    }

    #[test]
    fn overlap_subset_sizes() {
        let q = toy(100, 0.0);
        for (r, want) in [(0.1, 10), (0.3, 30), (0.7, 70), (0.9, 90), (0.15, 15), (0.001, 1)] {
            assert_eq!(overlap_subset(&q, r, 4).unwrap().len(), want, "ratio {r}");
        }
        assert!(overlap_subset(&q, 0.0, 4).is_err());
        assert!(overlap_subset(&q, 1.0, 4).is_err());
        let a = overlap_subset(&q, 0.2, 4).unwrap();
        let b = overlap_subset(&q, 0.4, 4).unwrap();
        assert!(a.inputs().iter().all(|x| b.inputs().contains(x)));
    }

    #[test]
    fn default_ratio_list() {
        let r = default_ratios();
        assert_eq!(r.len(), 9);
        assert_eq!(r[0], 0.1);
        assert_eq!(r[8], 0.9);
    }

    #[test]
    fn overlapping_query_is_rejected() {
        let t = toy(6, 0.0);
        let q = toy(4, 3.0);
        assert!(check_disjoint(&t, &q).is_err());
        assert!(check_disjoint(&t, &toy(4, 100.0)).is_ok());
    }
}
