use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leakage::median;
use crate::nn::ModelSpec;
use crate::tensor::Tensor;
use crate::timing::{ChannelKind, CollectionGuard, Slot, TimingChannel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackHeader {
    pub classes: usize,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub channel: ChannelKind,
}

/// Rows of per-input median timings, one class label per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackDataset {
    pub header: AttackHeader,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl AttackDataset {
    pub fn new(header: AttackHeader, rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::LengthError {
                expected: rows.len(),
                actual: labels.len(),
            });
        }
        if let Some(r) = rows.iter().find(|r| r.len() != header.p) {
            return Err(Error::LengthError {
                expected: header.p,
                actual: r.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= header.classes) {
            return Err(Error::RangeError(format!(
                "label {l} outside 0..{}",
                header.classes
            )));
        }
        Ok(AttackDataset {
            header,
            rows,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn width(&self) -> usize {
        self.header.p
    }

    pub fn subset(&self, indices: &[usize]) -> AttackDataset {
        AttackDataset {
            header: self.header.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Same labels, row order preserved.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<AttackDataset> {
        AttackDataset::new(self.header.clone(), self.rows.clone(), labels)
    }

    /// First line is the JSON header; each further line is `label,f1,...,fP`.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", serde_json::to_string(&self.header)?)?;
        for (row, label) in self.rows.iter().zip(&self.labels) {
            write!(out, "{label}")?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header: AttackHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::Format("attack dataset is empty".into())),
        };
        let (mut rows, mut labels) = (Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("attack dataset line {}: `{line}`", n + 2));
            let mut fields = line.split(',');
            let label = fields
                .next()
                .and_then(|s| s.trim().parse::<usize>().ok())
                .ok_or_else(bad)?;
            let row = fields
                .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
            labels.push(label);
        }
        AttackDataset::new(header, rows, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(std::fs::File::open(path)?))
    }
}

/// For each of `m` rounds and each class, draws `p` distinct inputs from the
/// class pool, records an `n`-rep trace per input and emits the row of their
/// medians in ascending order. Rows are shuffled at the end.
///
/// Draws depend only on `seed`, so two models measured with the same seed
/// see the same inputs in the same row positions.
#[allow(clippy::too_many_arguments)]
pub fn build_attack_dataset(
    model: &ModelSpec,
    by_class: &[Vec<Tensor>],
    p: usize,
    n: usize,
    m: usize,
    warmup: usize,
    channel: &mut dyn TimingChannel,
    seed: u64,
) -> Result<AttackDataset> {
    if p == 0 || n == 0 || m == 0 {
        return Err(Error::InvalidConfig(format!(
            "attack dataset needs P, N, M >= 1 (got {p}, {n}, {m})"
        )));
    }
    if by_class.is_empty() {
        return Err(Error::EmptyInput);
    }
    for (class, pool) in by_class.iter().enumerate() {
        if pool.len() < p {
            return Err(Error::InsufficientInputs {
                class,
                available: pool.len(),
                required: p,
            });
        }
    }
    let kind = channel.kind();
    let _guard = kind.is_wall_clock().then(CollectionGuard::acquire);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(m * by_class.len());
    let mut labels = Vec::with_capacity(m * by_class.len());
    for round in 0..m {
        for (class, pool) in by_class.iter().enumerate() {
            let mut picks = index::sample(&mut rng, pool.len(), p).into_vec();
            picks.sort_unstable();
            let mut row = picks
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    // a row's inputs are measured together; classes at different times
                    let slot = Slot::new(round, class * p + k);
                    let trace = channel.collect_total(model, &pool[i], slot, n, warmup)?;
                    median(&trace.samples_ns)
                })
                .collect::<Result<Vec<f64>>>()?;
            // the draw order means nothing, so features are order statistics
            row.sort_by(f64::total_cmp);
            rows.push(row);
            labels.push(class);
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(&mut rng);
    let header = AttackHeader {
        classes: by_class.len(),
        p,
        n,
        m,
        channel: kind,
    };
    let ds = AttackDataset::new(header, rows, labels)?;
    Ok(ds.subset(&order))
}

/// Stratified split. Each class keeps `round(fraction * count)` rows for
/// training, clamped so both sides get at least one.
pub fn split_dataset(
    ds: &AttackDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(AttackDataset, AttackDataset)> {
    let (train, test) = split_indices(&ds.labels, ds.header.classes, train_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Index form of [`split_dataset`]; both lists are ascending.
pub fn split_indices(
    labels: &[usize],
    classes: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::RangeError(format!(
            "train fraction {train_fraction} must lie in (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::TooFewRows(format!(
                "class {class} has {} row(s); a split needs 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let k = ((train_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, PoolVariant, PoolWindow};
    use crate::tensor::Shape;
    use crate::timing::SurrogateChannel;

    fn pool_model() -> ModelSpec {
        ModelSpec::new(
            Shape::new(vec![1, 2, 2]).unwrap(),
            1,
            vec![
                LayerSpec::MaxPool {
                    window: PoolWindow::square(2, 2, 0),
                    variant: PoolVariant::NaiveBranchy,
                },
                LayerSpec::Flatten,
            ],
        )
        .unwrap()
    }

    fn pools() -> Vec<Vec<Tensor>> {
        let t = |v: [f32; 4]| Tensor::from_dims(&[1, 2, 2], v.to_vec()).unwrap();
        vec![
            vec![t([1.0, 2.0, 3.0, 4.0]), t([0.0, 1.0, 2.0, 3.0]), t([1.0, 3.0, 5.0, 7.0])],
            vec![t([4.0, 3.0, 2.0, 1.0]), t([9.0, 1.0, 1.0, 1.0]), t([5.0, 0.0, 0.0, 0.0])],
        ]
    }

    fn toy_header(classes: usize, p: usize) -> AttackHeader {
        AttackHeader {
            classes,
            p,
            n: 1,
            m: 1,
            channel: ChannelKind::WallClock,
        }
    }

    #[test]
    fn cardinality_and_noiseless_rows() {
        let mut ch = SurrogateChannel::new(10.0, 100.0, 0.0, 0).unwrap();
        let ds = build_attack_dataset(&pool_model(), &pools(), 2, 3, 2, 0, &mut ch, 7).unwrap();
        assert_eq!(ds.len(), 4);
        assert!(ds.rows.iter().all(|r| r.len() == 2));
        // every input of class 0 takes 4 updates, every input of class 1 takes 1
        for (row, &label) in ds.rows.iter().zip(&ds.labels) {
            let want = if label == 0 { 140.0 } else { 110.0 };
            assert!(row.iter().all(|&v| v == want));
        }
        let again = build_attack_dataset(&pool_model(), &pools(), 2, 3, 2, 0, &mut ch, 7).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn insufficient_pool() {
        let mut ch = SurrogateChannel::new(10.0, 100.0, 0.0, 0).unwrap();
        assert!(matches!(
            build_attack_dataset(&pool_model(), &pools(), 4, 1, 1, 0, &mut ch, 0),
            Err(Error::InsufficientInputs { class: 0, available: 3, required: 4 })
        ));
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let rows = vec![vec![0.0]; 30];
        let ds = AttackDataset::new(toy_header(3, 1), rows, labels).unwrap();
        let (tr, te) = split_dataset(&ds, 0.8, 1).unwrap();
        for c in 0..3 {
            assert_eq!(tr.labels.iter().filter(|&&l| l == c).count(), 8);
            assert_eq!(te.labels.iter().filter(|&&l| l == c).count(), 2);
        }
        assert_eq!(split_indices(&ds.labels, 3, 0.8, 1).unwrap(), split_indices(&ds.labels, 3, 0.8, 1).unwrap());
        assert!(split_dataset(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn split_needs_two_rows_per_class() {
        let ds = AttackDataset::new(toy_header(2, 1), vec![vec![0.0]; 3], vec![0, 0, 1]).unwrap();
        assert!(matches!(split_dataset(&ds, 0.5, 0), Err(Error::TooFewRows(_))));
    }

    #[test]
    fn text_round_trip() {
        let ds = AttackDataset::new(
            toy_header(2, 2),
            vec![vec![1.5, 0.1 + 0.2], vec![1e9 / 7.0, 3.0]],
            vec![1, 0],
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        assert_eq!(AttackDataset::read(buf.as_slice()).unwrap(), ds);
        assert!(AttackDataset::read("{}\n".as_bytes()).is_err());
    }
}
