//! The subcommands. Each one loads data and model from the config, runs one
//! experiment and writes its artifacts into the output directory.

use poolleak_core::attack::{
    build_attack_dataset, evaluate, grid_search, mia_evaluate, mlp_train, overlap_evaluate,
    overlap_models, split_dataset, train_mia_models, ConfusionMatrix, GridResult, MIAResult,
    MLPSpec, MiaConfig,
};
use poolleak_core::data::{generate_synthetic, LabeledDataset};
use poolleak_core::leakage::{
    analyze_layerwise, analyze_pairs, class_update_counts, correlate_updates_time, median,
    Correlation, LayerwiseReport, LeakageReport,
};
use poolleak_core::nn::{build_custom_cnn, pool_update_counts, LayerSpec, ModelSpec, PoolVariant};
use poolleak_core::seeds::mix;
use poolleak_core::timing::{run_protocol, write_dump, DistributionSet, TimingChannel};
use poolleak_core::trainer::{accuracy, train, EpochRecord, TrainConfig};
use poolleak_core::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::chart::{ChartKind, PlotData};
use crate::config::{DatasetKind, ExperimentConfig, ModelKind, DATASET_FILE};
use crate::report::{wall_setup, Output};
use crate::CliError;

pub struct Outcome {
    pub files: Vec<std::path::PathBuf>,
    pub summary: String,
}

// Sub-seeds drawn from the shuffle stream.
const ATTACK_DRAWS: u64 = 1;
const ATTACK_SPLIT: u64 = 2;
const CLASSIFIER: u64 = 3;
const CT_INPUTS: u64 = 4;

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledDataset, CliError> {
    match cfg.dataset.source {
        DatasetKind::Synthetic => Ok(generate_synthetic(&cfg.dataset.synthetic, cfg.seeds().data_gen)
            .map_err(|e| CliError::Validation(e.to_string()))?),
        DatasetKind::Directory => {
            let dir = cfg.dataset.path.as_ref().expect("validated");
            Ok(LabeledDataset::load(dir.join(DATASET_FILE))?)
        }
    }
}

/// The untrained model: built from the model-init stream or loaded from file.
pub fn initial_model(cfg: &ExperimentConfig, data: &LabeledDataset) -> Result<ModelSpec, CliError> {
    let shape = data
        .inputs()
        .first()
        .ok_or_else(|| CliError::Validation("dataset is empty".into()))?
        .shape()
        .clone();
    let model = match cfg.model.source {
        ModelKind::BuildCustom => build_custom_cnn(&shape, data.class_count(), cfg.seeds().model_init)
            .map_err(|e| CliError::Validation(e.to_string()))?,
        ModelKind::File => ModelSpec::load(cfg.model.path.as_ref().expect("validated"))?,
    };
    if model.input_shape() != &shape || model.class_count() != data.class_count() {
        return Err(CliError::Validation(format!(
            "model takes {} inputs with {} classes, dataset has {} inputs with {} classes",
            model.input_shape(),
            model.class_count(),
            shape,
            data.class_count()
        )));
    }
    Ok(model)
}

pub fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.train.learning_rate,
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        seed: cfg.seeds().shuffle,
    }
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: Vec<EpochRecord>,
    final_accuracy: f64,
}

/// The measured model, trained first when `model.train` is set, with the configured pooling kernel.
fn victim(cfg: &ExperimentConfig, data: &LabeledDataset) -> Result<(ModelSpec, Option<TrainSummary>), CliError> {
    let init = initial_model(cfg, data)?;
    let (model, summary) = if cfg.model.train {
        let out = train(&init, data, &train_config(cfg), &cfg.dp)?;
        let final_accuracy = accuracy(&out.model, data)?;
        (out.model, Some(TrainSummary { epochs: out.log, final_accuracy }))
    } else {
        (init, None)
    };
    Ok((model.with_pool_variant(cfg.variant()), summary))
}

fn channel(cfg: &ExperimentConfig) -> Result<Box<dyn TimingChannel>, CliError> {
    Ok(cfg.channel_kind().build()?)
}

fn dump(out: &mut Output, name: &str, set: &DistributionSet) -> Result<(), CliError> {
    let mut buf = Vec::new();
    write_dump(set, &mut buf)?;
    out.write(name, &buf)?;
    Ok(())
}

fn class_time_medians(set: &DistributionSet) -> Result<Vec<f64>, CliError> {
    (0..set.classes)
        .map(|c| {
            let all: Vec<f64> = (0..set.runs)
                .filter_map(|r| set.get(c, r))
                .flat_map(|d| d.flattened())
                .collect();
            Ok(median(&all)?)
        })
        .collect()
}

#[derive(Serialize)]
struct PairsResult {
    leakage: LeakageReport,
    distinguishable_fraction: f64,
    /// Median update count and median time per class.
    class_update_counts: Vec<f64>,
    class_median_ns: Vec<f64>,
    /// Absent when every class has the same update count.
    correlation: Option<Correlation>,
}

fn pairs_result(model: &ModelSpec, data: &LabeledDataset, cfg: &ExperimentConfig, set: &DistributionSet) -> Result<PairsResult, CliError> {
    let leakage = analyze_pairs(set)?;
    let counts = class_update_counts(model, &data.by_class(), cfg.protocol.inputs_p)?;
    let medians = class_time_medians(set)?;
    let correlation = match correlate_updates_time(&counts, &medians) {
        Ok(c) => Some(c),
        Err(Error::DegenerateInput(_)) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(PairsResult {
        distinguishable_fraction: leakage.distinguishable_fraction(),
        leakage,
        class_update_counts: counts,
        class_median_ns: medians,
        correlation,
    })
}

fn pairs_chart(report: &LeakageReport, title: &str) -> PlotData {
    let mut data = PlotData::new(ChartKind::Bar, title, "class pair", "D (runs with i slower than j)");
    for p in &report.pairs {
        data.push(vec![format!("{}-{}", p.class_i, p.class_j), p.d.to_string()]);
    }
    data
}

#[derive(Serialize)]
struct AnalyzePairsReport {
    pool_variant: PoolVariant,
    training: Option<TrainSummary>,
    pairs: PairsResult,
}

pub fn cmd_analyze_pairs(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let data = load_dataset(cfg)?;
    let (model, training) = victim(cfg, &data)?;
    let (_lock, env) = wall_setup(cfg)?;
    let mut ch = channel(cfg)?;
    let set = run_protocol(&model, &data.by_class(), &cfg.protocol, ch.as_mut())?;
    let pairs = pairs_result(&model, &data, cfg, &set)?;
    let mut out = Output::create(&cfg.out)?;
    dump(&mut out, "analyze-pairs.dump.csv", &set)?;
    out.chart("analyze-pairs", &pairs_chart(&pairs.leakage, "Per-pair decision variable"))?;
    let summary = format!(
        "{} of {} class pairs distinguishable",
        pairs.leakage.distinguishable_count, pairs.leakage.total_pairs
    );
    out.report(
        "analyze-pairs.json",
        "analyze-pairs",
        cfg,
        env,
        AnalyzePairsReport {
            pool_variant: cfg.variant(),
            training,
            pairs,
        },
    )?;
    Ok(Outcome {
        files: out.files,
        summary,
    })
}

#[derive(Serialize)]
struct LayerwiseResult {
    pool_variant: PoolVariant,
    training: Option<TrainSummary>,
    layerwise: LayerwiseReport,
}

pub fn cmd_layerwise(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let data = load_dataset(cfg)?;
    let (model, training) = victim(cfg, &data)?;
    let (_lock, env) = wall_setup(cfg)?;
    let mut ch = channel(cfg)?;
    let layerwise = analyze_layerwise(&model, &data.by_class(), &cfg.protocol, ch.as_mut())?;
    let mut out = Output::create(&cfg.out)?;
    let mut chart = PlotData::new(ChartKind::Bar, "Distinguishable pairs per layer", "layer", "pairs");
    for l in &layerwise.layers {
        chart.push(vec![l.index.to_string(), l.distinguishable_count.to_string()]);
    }
    out.chart("layerwise", &chart)?;
    let best = layerwise
        .layers
        .iter()
        .max_by_key(|l| (l.distinguishable_count, std::cmp::Reverse(l.index)))
        .map(|l| format!("layer {} ({}) distinguishes {} of {} pairs", l.index, l.kind, l.distinguishable_count, layerwise.total_pairs))
        .unwrap_or_default();
    out.report(
        "layerwise.json",
        "layerwise",
        cfg,
        env,
        LayerwiseResult {
            pool_variant: cfg.variant(),
            training,
            layerwise,
        },
    )?;
    Ok(Outcome {
        files: out.files,
        summary: best,
    })
}

fn confusion_chart(cm: &ConfusionMatrix, title: &str) -> PlotData {
    let mut data = PlotData::new(ChartKind::Heat, title, "predicted class", "true class");
    for row in &cm.counts {
        data.push(row.iter().map(u64::to_string).collect());
    }
    data
}

#[derive(Serialize)]
struct AttackResult {
    pool_variant: PoolVariant,
    training: Option<TrainSummary>,
    rows: usize,
    train_rows: usize,
    test_rows: usize,
    grid: Option<GridResult>,
    classifier: MLPSpec,
    accuracy: f64,
    chance: f64,
    confusion: ConfusionMatrix,
}

pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let data = load_dataset(cfg)?;
    let (model, training) = victim(cfg, &data)?;
    let (_lock, env) = wall_setup(cfg)?;
    let mut ch = channel(cfg)?;
    let shuffle = cfg.seeds().shuffle;
    let p = &cfg.protocol;
    let ds = build_attack_dataset(
        &model,
        &data.by_class(),
        p.inputs_p,
        p.reps_n,
        p.runs_m,
        p.warmup,
        ch.as_mut(),
        mix(&[shuffle, ATTACK_DRAWS]),
    )?;
    drop(_lock);
    let (fit, test) = split_dataset(&ds, cfg.attack.train_fraction, mix(&[shuffle, ATTACK_SPLIT]))?;
    let base = cfg.attack.classifier.spec(mix(&[shuffle, CLASSIFIER]));
    let grid = if cfg.attack.grid_search {
        let space = MLPSpec::default_space(base.epochs, base.seed);
        Some(grid_search(&fit, &space, cfg.attack.folds, base.seed)?)
    } else {
        None
    };
    let spec = grid.as_ref().map_or(base, |g| g.best.clone());
    let clf = mlp_train(&fit, &spec)?;
    let (acc, confusion) = evaluate(&clf, &test)?;

    let mut out = Output::create(&cfg.out)?;
    let mut buf = Vec::new();
    ds.write(&mut buf)?;
    out.write("attack.dataset.csv", &buf)?;
    out.chart("attack", &confusion_chart(&confusion, "Label classifier confusion (test rows)"))?;
    let chance = 1.0 / ds.header.classes as f64;
    let summary = format!("label classifier test accuracy {acc:.4} (chance {chance:.4})");
    out.report(
        "attack.json",
        "attack",
        cfg,
        env,
        AttackResult {
            pool_variant: cfg.variant(),
            training,
            rows: ds.len(),
            train_rows: fit.len(),
            test_rows: test.len(),
            grid,
            classifier: spec,
            accuracy: acc,
            chance,
            confusion,
        },
    )?;
    Ok(Outcome {
        files: out.files,
        summary,
    })
}

fn mia_config(cfg: &ExperimentConfig) -> MiaConfig {
    let shuffle = cfg.seeds().shuffle;
    MiaConfig {
        train: train_config(cfg),
        dp: cfg.dp.clone(),
        protocol: cfg.protocol.clone(),
        classifier: cfg.attack.classifier.spec(mix(&[shuffle, CLASSIFIER])),
        train_fraction: cfg.attack.train_fraction,
        retrain_mode: cfg.mia.retrain_mode,
        seed: mix(&[shuffle, ATTACK_DRAWS]),
    }
}

fn mia_split(cfg: &ExperimentConfig, data: &LabeledDataset) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    let (t, q) = data.split_per_class(cfg.mia.train_per_class);
    if q.is_empty() {
        return Err(CliError::Validation(format!(
            "mia.train_per_class = {} leaves no query examples",
            cfg.mia.train_per_class
        )));
    }
    Ok((t, q))
}

#[derive(Serialize)]
struct MiaReport {
    pool_variant: PoolVariant,
    train_examples: usize,
    query_examples: usize,
    model1_train_accuracy: f64,
    model2_train_accuracy: f64,
    /// Median max-pool update count per class over the query set, under each model.
    model1_class_update_counts: Vec<f64>,
    model2_class_update_counts: Vec<f64>,
    result: MIAResult,
    s1_confusion: ConfusionMatrix,
    s2_confusion: ConfusionMatrix,
    /// The same two models measured with constant-time pooling.
    constant_time_control: Option<MIAResult>,
}

pub fn cmd_mia(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let data = load_dataset(cfg)?;
    let init = initial_model(cfg, &data)?;
    let (t, q) = mia_split(cfg, &data)?;
    let mcfg = mia_config(cfg);
    let (m1, m2) = train_mia_models(&init, &t, &q, &mcfg)?;
    let acc1 = accuracy(&m1, &t)?;
    let acc2 = accuracy(&m2, &t.concat(&q)?)?;
    let q_by_class = q.by_class();
    let q_min = q_by_class.iter().map(Vec::len).min().unwrap_or(0);
    let (_lock, env) = wall_setup(cfg)?;
    let mut ch = channel(cfg)?;
    let variant = cfg.variant();
    let outcome = mia_evaluate(
        &m1.with_pool_variant(variant),
        &m2.with_pool_variant(variant),
        &q,
        &mcfg,
        ch.as_mut(),
    )?;
    let control = if variant == PoolVariant::ConstantTime {
        None
    } else {
        let ct = PoolVariant::ConstantTime;
        Some(mia_evaluate(&m1.with_pool_variant(ct), &m2.with_pool_variant(ct), &q, &mcfg, ch.as_mut())?.result)
    };
    drop(_lock);

    let mut out = Output::create(&cfg.out)?;
    let r = &outcome.result;
    let mut chart = PlotData::new(ChartKind::Bar, "Label classifier accuracy on the query set", "timings", "accuracy");
    chart.push(vec!["S1".into(), r.acc_s1.to_string()]);
    chart.push(vec!["S2".into(), r.acc_s2.to_string()]);
    if let Some(c) = &control {
        chart.push(vec!["S1-ct".into(), c.acc_s1.to_string()]);
        chart.push(vec!["S2-ct".into(), c.acc_s2.to_string()]);
    }
    out.chart("mia", &chart)?;
    out.chart("mia.s1-confusion", &confusion_chart(&outcome.s1_confusion, "S1 confusion"))?;
    out.chart("mia.s2-confusion", &confusion_chart(&outcome.s2_confusion, "S2 confusion"))?;
    let summary = format!(
        "S1 accuracy {:.4}, S2 accuracy {:.4}, gap {:.4}",
        r.acc_s1, r.acc_s2, r.gap
    );
    out.report(
        "mia.json",
        "mia",
        cfg,
        env,
        MiaReport {
            pool_variant: variant,
            train_examples: t.len(),
            query_examples: q.len(),
            model1_train_accuracy: acc1,
            model2_train_accuracy: acc2,
            model1_class_update_counts: class_update_counts(&m1, &q_by_class, q_min)?,
            model2_class_update_counts: class_update_counts(&m2, &q_by_class, q_min)?,
            result: outcome.result,
            s1_confusion: outcome.s1_confusion,
            s2_confusion: outcome.s2_confusion,
            constant_time_control: control,
        },
    )?;
    Ok(Outcome {
        files: out.files,
        summary,
    })
}

#[derive(Serialize)]
struct OverlapReport {
    pool_variant: PoolVariant,
    baseline: f64,
    ratios: Vec<f64>,
    accuracies: Vec<f64>,
    /// `baseline - accuracy` per ratio.
    drops: Vec<f64>,
}

pub fn cmd_overlap(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let data = load_dataset(cfg)?;
    let init = initial_model(cfg, &data)?;
    let (t, q) = mia_split(cfg, &data)?;
    let mcfg = mia_config(cfg);
    let m1 = train(&init, &t, &mcfg.train, &mcfg.dp)?.model;
    let models = overlap_models(&init, &m1, &t, &q, &cfg.mia.ratios, &mcfg)?;
    let variant = cfg.variant();
    let models: Vec<ModelSpec> = models.iter().map(|m| m.with_pool_variant(variant)).collect();
    let (_lock, env) = wall_setup(cfg)?;
    let mut ch = channel(cfg)?;
    let sweep = overlap_evaluate(
        &m1.with_pool_variant(variant),
        &models,
        &cfg.mia.ratios,
        &q,
        &mcfg,
        ch.as_mut(),
    )?;
    drop(_lock);

    let mut out = Output::create(&cfg.out)?;
    let mut chart = PlotData::new(ChartKind::Line, "Accuracy against query-set overlap", "overlap ratio", "accuracy");
    for (r, a) in sweep.ratios.iter().zip(&sweep.accuracies) {
        chart.push(vec![r.to_string(), a.to_string()]);
    }
    out.chart("overlap", &chart)?;
    let drops: Vec<f64> = sweep.accuracies.iter().map(|a| sweep.baseline - a).collect();
    let min_drop = drops.iter().copied().fold(f64::INFINITY, f64::min);
    let summary = format!("baseline {:.4}, smallest drop {:.4}", sweep.baseline, min_drop);
    out.report(
        "overlap.json",
        "overlap",
        cfg,
        env,
        OverlapReport {
            pool_variant: variant,
            baseline: sweep.baseline,
            ratios: sweep.ratios,
            accuracies: sweep.accuracies,
            drops,
        },
    )?;
    Ok(Outcome {
        files: out.files,
        summary,
    })
}

#[derive(Serialize)]
struct CompareReport {
    training: Option<TrainSummary>,
    naive: PairsResult,
    constant_time: PairsResult,
}

pub fn cmd_compare_countermeasure(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let data = load_dataset(cfg)?;
    let (model, training) = victim(cfg, &data)?;
    let (_lock, env) = wall_setup(cfg)?;
    let by_class = data.by_class();
    let mut results = Vec::new();
    let mut sets = Vec::new();
    for variant in [PoolVariant::NaiveBranchy, PoolVariant::ConstantTime] {
        let m = model.with_pool_variant(variant);
        let mut ch = channel(cfg)?;
        let set = run_protocol(&m, &by_class, &cfg.protocol, ch.as_mut())?;
        results.push(pairs_result(&m, &data, cfg, &set)?);
        sets.push(set);
    }
    drop(_lock);
    let constant_time = results.pop().expect("two variants");
    let naive = results.pop().expect("two variants");

    let mut out = Output::create(&cfg.out)?;
    dump(&mut out, "compare.naive.dump.csv", &sets[0])?;
    dump(&mut out, "compare.ct.dump.csv", &sets[1])?;
    let mut chart = PlotData::new(ChartKind::Bar, "Distinguishable pairs before and after the countermeasure", "pooling kernel", "pairs");
    chart.push(vec!["naive".into(), naive.leakage.distinguishable_count.to_string()]);
    chart.push(vec!["ct".into(), constant_time.leakage.distinguishable_count.to_string()]);
    out.chart("compare", &chart)?;
    let summary = format!(
        "distinguishable pairs: naive {} / ct {} of {}",
        naive.leakage.distinguishable_count,
        constant_time.leakage.distinguishable_count,
        naive.leakage.total_pairs
    );
    out.report(
        "compare.json",
        "compare-countermeasure",
        cfg,
        env,
        CompareReport {
            training,
            naive,
            constant_time,
        },
    )?;
    Ok(Outcome {
        files: out.files,
        summary,
    })
}

#[derive(Serialize)]
struct CtVerifyReport {
    inputs: usize,
    /// `windows * kernel_h * kernel_w` per max-pool layer.
    expected_per_layer: Vec<u64>,
    /// Inputs whose constant-time counts differ from the expected ones.
    mismatches: usize,
    constant_time_distinct_totals: usize,
    naive_distinct_totals: usize,
    naive_min_total: u64,
    naive_max_total: u64,
    pass: bool,
}

/// Update count of every max-pool layer implied by the layer shapes alone.
pub fn expected_ct_counts(model: &ModelSpec) -> Result<Vec<u64>, CliError> {
    let shapes = model.layer_shapes()?;
    Ok(model
        .layers()
        .iter()
        .zip(&shapes)
        .filter_map(|(layer, shape)| match layer {
            LayerSpec::MaxPool { window, .. } => {
                Some((shape.len() * window.kernel_h * window.kernel_w) as u64)
            }
            _ => None,
        })
        .collect())
}

pub fn cmd_ct_verify(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let data = load_dataset(cfg)?;
    let (model, _) = victim(cfg, &data)?;
    let ct = model.with_pool_variant(PoolVariant::ConstantTime);
    let naive = model.with_pool_variant(PoolVariant::NaiveBranchy);
    let expected = expected_ct_counts(&ct)?;
    let shape = ct.input_shape().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seeds().shuffle, CT_INPUTS]));
    let (mut mismatches, mut ct_totals, mut naive_totals) = (0usize, Vec::new(), Vec::new());
    for _ in 0..cfg.ct_verify.inputs {
        let values: Vec<f32> = (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::new(shape.clone(), values)?;
        let counts = pool_update_counts(&ct, &x)?;
        mismatches += (counts != expected) as usize;
        ct_totals.push(counts.iter().sum::<u64>());
        naive_totals.push(pool_update_counts(&naive, &x)?.iter().sum::<u64>());
    }
    let distinct = |v: &mut Vec<u64>| {
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    let (naive_min, naive_max) = (
        *naive_totals.iter().min().expect("inputs >= 1"),
        *naive_totals.iter().max().expect("inputs >= 1"),
    );
    let report = CtVerifyReport {
        inputs: cfg.ct_verify.inputs,
        expected_per_layer: expected.clone(),
        mismatches,
        constant_time_distinct_totals: distinct(&mut ct_totals),
        naive_distinct_totals: distinct(&mut naive_totals),
        naive_min_total: naive_min,
        naive_max_total: naive_max,
        pass: mismatches == 0,
    };

    let mut out = Output::create(&cfg.out)?;
    let mut chart = PlotData::new(ChartKind::Bar, "Max-pool update counts over random inputs", "kernel", "updates");
    chart.push(vec!["ct".into(), expected.iter().sum::<u64>().to_string()]);
    chart.push(vec!["naive-min".into(), naive_min.to_string()]);
    chart.push(vec!["naive-max".into(), naive_max.to_string()]);
    out.chart("ct-verify", &chart)?;
    let pass = report.pass;
    let summary = format!(
        "{} of {} inputs deviate from the constant-time counts {:?}",
        mismatches, cfg.ct_verify.inputs, expected
    );
    out.report("ct-verify.json", "ct-verify", cfg, None, report)?;
    if !pass {
        return Err(CliError::Runtime(summary));
    }
    Ok(Outcome {
        files: out.files,
        summary,
    })
}

