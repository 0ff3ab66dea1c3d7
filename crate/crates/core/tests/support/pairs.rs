//! Brute-force pair verdicts and random protocols with forced ties.

use std::collections::BTreeMap;

use poolleak_core::timing::{DistributionSet, TimingDistribution, TimingTrace};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Sorts and takes rank `(n - 1) / 2`.
pub fn oracle_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[(s.len() - 1) / 2]
}

/// Every `(class, run)` distribution is given as its flat sample list.
pub fn oracle_verdicts(samples: &[Vec<Vec<f64>>]) -> Vec<(usize, usize, bool)> {
    let classes = samples.len();
    let runs = samples[0].len();
    let mut out = Vec::new();
    for i in 0..classes {
        for j in i + 1..classes {
            let mut d = 0i64;
            let mut ties = 0usize;
            for m in 0..runs {
                let (a, b) = (oracle_median(&samples[i][m]), oracle_median(&samples[j][m]));
                if a > b {
                    d += 1;
                }
                if a == b {
                    ties += 1;
                }
            }
            let half = ((runs - ties) / 2) as i64;
            let distinguishable = (d - half).abs() >= 2;
            out.push((i, j, distinguishable));
        }
    }
    out
}

pub fn build_set(samples: &[Vec<Vec<f64>>], traces_per: usize) -> DistributionSet {
    let classes = samples.len();
    let runs = samples[0].len();
    let mut map = BTreeMap::new();
    for (c, per_run) in samples.iter().enumerate() {
        for (m, flat) in per_run.iter().enumerate() {
            let chunk = flat.len().div_ceil(traces_per);
            let traces = flat
                .chunks(chunk)
                .map(|s| TimingTrace::new(s.to_vec()).unwrap())
                .collect();
            map.insert(
                (c, m),
                TimingDistribution {
                    class_id: c,
                    run_id: m,
                    traces,
                },
            );
        }
    }
    DistributionSet {
        classes,
        runs,
        map,
    }
}

/// Class means on a coarse grid so that exact median ties occur.
pub fn random_protocol(rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    let classes = rng.random_range(2..=6);
    let runs = rng.random_range(1..=20);
    let reps = rng.random_range(1..=9);
    let means: Vec<f64> = (0..classes).map(|_| 1000.0 + rng.random_range(0..4) as f64 * 5.0).collect();
    means
        .iter()
        .map(|&mu| {
            (0..runs)
                .map(|_| {
                    (0..reps)
                        .map(|_| mu + rng.random_range(-3i32..=3) as f64 * 2.0)
                        .collect()
                })
                .collect()
        })
        .collect()
}
