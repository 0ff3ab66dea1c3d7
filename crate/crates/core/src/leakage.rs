//! Median-sign distinguishability statistics.
//!
//! For classes `i < j` and run `m`, `B_m = 1` when the median duration of
//! class `i` exceeds that of class `j`. `D = sum_m B_m`, and the pair is
//! distinguishable when `D <= M/2 - 2` or `D >= M/2 + 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{pool_update_counts, ModelSpec};
use crate::tensor::Tensor;
use crate::timing::{run_protocol_layers, CollectionProtocol, DistributionSet, TimingChannel};

/// Lower median: the element of rank `(n - 1) / 2`. Never averages.
pub fn median(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut v = samples.to_vec();
    let k = (v.len() - 1) / 2;
    let (_, m, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    Ok(*m)
}

/// 1 if `median_i > median_j`, else 0 (ties included).
pub fn indicator_b(median_i: f64, median_j: f64) -> u8 {
    (median_i > median_j) as u8
}

pub fn decision_d(bits: &[u8]) -> Result<usize> {
    if bits.is_empty() {
        return Err(Error::LengthError {
            expected: 1,
            actual: 0,
        });
    }
    if let Some(&b) = bits.iter().find(|&&b| b > 1) {
        return Err(Error::RangeError(format!("indicator bit {b} is not 0 or 1")));
    }
    Ok(bits.iter().map(|&b| b as usize).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Distinguishable,
    /// Includes the inconclusive band `M/2 - 1 ..= M/2 + 1`.
    Indistinguishable,
}

/// Threshold rule on `D` out of `m` runs. Odd `m` uses `floor(m / 2)`.
pub fn classify_pair(d: usize, m: usize) -> Result<Verdict> {
    if d > m {
        return Err(Error::RangeError(format!("D = {d} exceeds M = {m}")));
    }
    let (d, half) = (d as i64, (m / 2) as i64);
    Ok(if d <= half - 2 || d >= half + 2 {
        Verdict::Distinguishable
    } else {
        Verdict::Indistinguishable
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDecision {
    pub class_i: usize,
    pub class_j: usize,
    pub b_per_run: Vec<u8>,
    /// Runs whose medians were exactly equal. They contribute `B = 0` and are
    /// left out of the run count the verdict is judged against.
    pub ties: usize,
    pub d: usize,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub classes: usize,
    pub runs: usize,
    pub pairs: Vec<PairDecision>,
    pub distinguishable_count: usize,
    pub total_pairs: usize,
}

impl LeakageReport {
    pub fn distinguishable_fraction(&self) -> f64 {
        if self.total_pairs == 0 {
            0.0
        } else {
            self.distinguishable_count as f64 / self.total_pairs as f64
        }
    }
}

/// Per-run medians, indexed `[class][run]`.
pub fn class_medians(set: &DistributionSet) -> Result<Vec<Vec<f64>>> {
    (0..set.classes)
        .map(|c| {
            (0..set.runs)
                .map(|m| {
                    let dist = set.get(c, m).ok_or_else(|| {
                        Error::MissingData(format!("no distribution for class {c}, run {m}"))
                    })?;
                    median(&dist.flattened())
                })
                .collect()
        })
        .collect()
}

pub fn analyze_pairs(set: &DistributionSet) -> Result<LeakageReport> {
    if set.classes < 2 || set.runs == 0 {
        return Err(Error::MissingData(format!(
            "need at least 2 classes and 1 run, got {} classes and {} runs",
            set.classes, set.runs
        )));
    }
    let medians = class_medians(set)?;
    let mut pairs = Vec::with_capacity(set.classes * (set.classes - 1) / 2);
    for i in 0..set.classes {
        for j in i + 1..set.classes {
            let b_per_run: Vec<u8> = (0..set.runs)
                .map(|m| indicator_b(medians[i][m], medians[j][m]))
                .collect();
            let ties = (0..set.runs)
                .filter(|&m| medians[i][m] == medians[j][m])
                .count();
            let d = decision_d(&b_per_run)?;
            let verdict = classify_pair(d, set.runs - ties)?;
            pairs.push(PairDecision {
                class_i: i,
                class_j: j,
                b_per_run,
                ties,
                d,
                verdict,
            });
        }
    }
    let distinguishable_count = pairs
        .iter()
        .filter(|p| p.verdict == Verdict::Distinguishable)
        .count();
    Ok(LeakageReport {
        classes: set.classes,
        runs: set.runs,
        total_pairs: pairs.len(),
        pairs,
        distinguishable_count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub index: usize,
    pub kind: String,
    pub distinguishable_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseReport {
    pub total_pairs: usize,
    pub layers: Vec<LayerCount>,
}

/// Pairwise analysis repeated on each layer's duration stream.
pub fn analyze_layerwise(
    model: &ModelSpec,
    by_class: &[Vec<Tensor>],
    protocol: &CollectionProtocol,
    channel: &mut dyn TimingChannel,
) -> Result<LayerwiseReport> {
    let sets = run_protocol_layers(model, by_class, protocol, channel)?;
    layerwise_from_sets(model, &sets)
}

pub fn layerwise_from_sets(model: &ModelSpec, sets: &[DistributionSet]) -> Result<LayerwiseReport> {
    let mut layers = Vec::with_capacity(sets.len());
    let mut total_pairs = 0;
    for (index, (set, layer)) in sets.iter().zip(model.layers()).enumerate() {
        let report = analyze_pairs(set)?;
        total_pairs = report.total_pairs;
        layers.push(LayerCount {
            index,
            kind: layer.kind_name().to_string(),
            distinguishable_count: report.distinguishable_count,
        });
    }
    Ok(LayerwiseReport {
        total_pairs,
        layers,
    })
}

/// Lower median of the total max-pool update counts of each class's first `p` inputs.
pub fn class_update_counts(model: &ModelSpec, by_class: &[Vec<Tensor>], p: usize) -> Result<Vec<f64>> {
    by_class
        .iter()
        .map(|pool| {
            let counts: Vec<f64> = pool
                .iter()
                .take(p)
                .map(|x| Ok(pool_update_counts(model, x)?.iter().sum::<u64>() as f64))
                .collect::<Result<_>>()?;
            median(&counts)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// Share of class pairs whose count order matches their median-time
    /// order, over pairs where neither difference is zero.
    pub consistency_fraction: f64,
    /// Spearman rank correlation with average ranks for ties.
    pub rank_correlation: f64,
}

pub fn correlate_updates_time(counts: &[f64], medians: &[f64]) -> Result<Correlation> {
    if counts.len() != medians.len() {
        return Err(Error::LengthError {
            expected: counts.len(),
            actual: medians.len(),
        });
    }
    if counts.len() < 2 || counts.iter().all(|&c| c == counts[0]) {
        return Err(Error::DegenerateInput(
            "update counts are all equal; no ordering to compare".into(),
        ));
    }
    let (mut agree, mut compared) = (0usize, 0usize);
    for i in 0..counts.len() {
        for j in i + 1..counts.len() {
            let sc = (counts[i] - counts[j]).signum();
            let st = (medians[i] - medians[j]).signum();
            if counts[i] == counts[j] || medians[i] == medians[j] {
                continue;
            }
            compared += 1;
            agree += (sc == st) as usize;
        }
    }
    let consistency_fraction = if compared == 0 {
        0.0
    } else {
        agree as f64 / compared as f64
    };
    Ok(Correlation {
        consistency_fraction,
        rank_correlation: pearson(&average_ranks(counts), &average_ranks(medians)),
    })
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0 + 1.0;
        for &k in &order[start..end] {
            ranks[k] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timing::TimingTrace;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0]).unwrap(), 3.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0, 5.0]).unwrap(), 3.0);
        assert!(matches!(median(&[]), Err(Error::EmptyInput)));
        let v = vec![5.0, 1.0, 3.0];
        median(&v).unwrap();
        assert_eq!(v, vec![5.0, 1.0, 3.0]);
    }

    #[test]
    fn indicator_cases() {
        assert_eq!(indicator_b(5.2, 4.8), 1);
        assert_eq!(indicator_b(4.8, 5.2), 0);
        assert_eq!(indicator_b(5.0, 5.0), 0);
    }

    #[test]
    fn decision_cases() {
        assert_eq!(decision_d(&[1, 1, 1]).unwrap(), 3);
        assert_eq!(decision_d(&[0, 0, 0, 0]).unwrap(), 0);
        assert!(matches!(decision_d(&[]), Err(Error::LengthError { .. })));
        assert!(decision_d(&[2]).is_err());
    }

    #[test]
    fn classify_cases() {
        assert_eq!(classify_pair(3, 10).unwrap(), Verdict::Distinguishable);
        assert_eq!(classify_pair(5, 10).unwrap(), Verdict::Indistinguishable);
        assert_eq!(classify_pair(10, 10).unwrap(), Verdict::Distinguishable);
        assert_eq!(classify_pair(4, 10).unwrap(), Verdict::Indistinguishable);
        assert_eq!(classify_pair(6, 10).unwrap(), Verdict::Indistinguishable);
        assert_eq!(classify_pair(7, 10).unwrap(), Verdict::Distinguishable);
        assert_eq!(classify_pair(0, 0).unwrap(), Verdict::Indistinguishable);
        // odd M = 11 uses floor(11/2) = 5
        assert_eq!(classify_pair(3, 11).unwrap(), Verdict::Distinguishable);
        assert_eq!(classify_pair(6, 11).unwrap(), Verdict::Indistinguishable);
        assert_eq!(classify_pair(7, 11).unwrap(), Verdict::Distinguishable);
        assert!(matches!(classify_pair(11, 10), Err(Error::RangeError(_))));
    }

    fn constant_set(values: &[Vec<f64>]) -> DistributionSet {
        // values[class][run] -> single-sample distribution
        let mut set = DistributionSet::new(values.len(), values[0].len());
        for (c, runs) in values.iter().enumerate() {
            for (m, &v) in runs.iter().enumerate() {
                set.map.insert(
                    (c, m),
                    crate::timing::TimingDistribution {
                        class_id: c,
                        run_id: m,
                        traces: vec![TimingTrace::new(vec![v]).unwrap()],
                    },
                );
            }
        }
        set
    }

    #[test]
    fn separated_classes_are_distinguishable() {
        let set = constant_set(&[vec![10.0; 6], vec![20.0; 6]]);
        let r = analyze_pairs(&set).unwrap();
        assert_eq!(r.total_pairs, 1);
        assert_eq!(r.distinguishable_count, 1);
        assert_eq!(r.pairs[0].d, 0);
        let set = constant_set(&[vec![30.0; 6], vec![20.0; 6]]);
        assert_eq!(analyze_pairs(&set).unwrap().pairs[0].d, 6);
    }

    #[test]
    fn identical_classes_are_indistinguishable() {
        let set = constant_set(&[vec![10.0; 6], vec![10.0; 6]]);
        let r = analyze_pairs(&set).unwrap();
        assert_eq!(r.pairs[0].d, 0);
        assert_eq!(r.pairs[0].ties, 6);
        assert_eq!(r.pairs[0].verdict, Verdict::Indistinguishable);
    }

    #[test]
    fn missing_distribution_is_reported() {
        let mut set = constant_set(&[vec![10.0; 2], vec![10.0; 2]]);
        set.map.remove(&(1, 1));
        assert!(matches!(analyze_pairs(&set), Err(Error::MissingData(_))));
    }

    #[test]
    fn correlation_cases() {
        let c = correlate_updates_time(&[10.0, 20.0, 30.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(c.consistency_fraction, 1.0);
        assert_eq!(c.rank_correlation, 1.0);
        let c = correlate_updates_time(&[10.0, 20.0], &[2.0, 1.0]).unwrap();
        assert_eq!(c.consistency_fraction, 0.0);
        assert_eq!(c.rank_correlation, -1.0);
        assert!(matches!(
            correlate_updates_time(&[5.0, 5.0], &[1.0, 2.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
