//! Timing collection under the repetitions x inputs x runs protocol.
//!
//! For every run instance, class and input, a trace of `reps_n` durations is
//! recorded; the traces of the `inputs_p` inputs of a class are appended into
//! that class's distribution for the run. Within a run, inputs are visited
//! class-round-robin.

mod channel;
mod clock;
mod dump;

pub use channel::{
    collect_trace, measure_layers, measure_total, ChannelKind, Slot, SurrogateChannel,
    TimingChannel, WallClockChannel,
};
pub use clock::{
    pin_current_thread, probe_clock_resolution, wallclock_self_test, CollectionGuard, JitterCheck,
    DEFAULT_JITTER_BUDGET_NS,
};
pub use dump::{read_dump, write_dump, DUMP_HEADER};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionProtocol {
    /// Repetitions per input.
    pub reps_n: usize,
    /// Inputs per class.
    pub inputs_p: usize,
    /// Independent run instances.
    pub runs_m: usize,
    /// Leading repetitions run and discarded.
    #[serde(default = "default_warmup")]
    pub warmup: usize,
}

fn default_warmup() -> usize {
    10
}

impl CollectionProtocol {
    pub fn new(reps_n: usize, inputs_p: usize, runs_m: usize, warmup: usize) -> Result<Self> {
        let p = CollectionProtocol {
            reps_n,
            inputs_p,
            runs_m,
            warmup,
        };
        p.validate()?;
        Ok(p)
    }

    /// N = 500, P = 100, M = 1000.
    pub fn full_scale() -> Self {
        CollectionProtocol {
            reps_n: 500,
            inputs_p: 100,
            runs_m: 1000,
            warmup: default_warmup(),
        }
    }

    /// N = 50, P = 10, M = 10.
    pub fn desk() -> Self {
        CollectionProtocol {
            reps_n: 50,
            inputs_p: 10,
            runs_m: 10,
            warmup: default_warmup(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps_n == 0 || self.inputs_p == 0 || self.runs_m == 0 {
            return Err(Error::InvalidConfig(format!(
                "protocol needs reps_n, inputs_p, runs_m >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Durations of one input over the repetitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingTrace {
    pub samples_ns: Vec<f64>,
}

impl TimingTrace {
    pub fn new(samples_ns: Vec<f64>) -> Result<Self> {
        if samples_ns.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::RangeError("timing samples must be positive".into()));
        }
        Ok(TimingTrace { samples_ns })
    }

    pub fn len(&self) -> usize {
        self.samples_ns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples_ns.is_empty()
    }
}

/// The appended traces of one class in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingDistribution {
    pub class_id: usize,
    pub run_id: usize,
    pub traces: Vec<TimingTrace>,
}

impl TimingDistribution {
    pub fn flattened(&self) -> Vec<f64> {
        self.traces
            .iter()
            .flat_map(|t| t.samples_ns.iter().copied())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.traces.iter().map(TimingTrace::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Distributions keyed by `(class, run)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistributionSet {
    pub classes: usize,
    pub runs: usize,
    pub map: BTreeMap<(usize, usize), TimingDistribution>,
}

impl DistributionSet {
    pub fn new(classes: usize, runs: usize) -> Self {
        DistributionSet {
            classes,
            runs,
            map: BTreeMap::new(),
        }
    }

    pub fn get(&self, class: usize, run: usize) -> Option<&TimingDistribution> {
        self.map.get(&(class, run))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn push_trace(&mut self, class: usize, run: usize, trace: TimingTrace) {
        self.map
            .entry((class, run))
            .or_insert_with(|| TimingDistribution {
                class_id: class,
                run_id: run,
                traces: Vec::new(),
            })
            .traces
            .push(trace);
    }
}

fn check_inputs(by_class: &[Vec<Tensor>], protocol: &CollectionProtocol) -> Result<()> {
    protocol.validate()?;
    if by_class.is_empty() {
        return Err(Error::EmptyInput);
    }
    for (class, pool) in by_class.iter().enumerate() {
        if pool.len() < protocol.inputs_p {
            return Err(Error::InsufficientInputs {
                class,
                available: pool.len(),
                required: protocol.inputs_p,
            });
        }
    }
    Ok(())
}

/// Visits run -> input position -> class, calling `measure` for each and
/// appending the returned streams into one `DistributionSet` per stream.
fn run_schedule<F>(
    by_class: &[Vec<Tensor>],
    protocol: &CollectionProtocol,
    exclusive: bool,
    streams: usize,
    mut measure: F,
) -> Result<Vec<DistributionSet>>
where
    F: FnMut(&Tensor, Slot) -> Result<Vec<TimingTrace>>,
{
    check_inputs(by_class, protocol)?;
    let _guard = exclusive.then(CollectionGuard::acquire);
    let classes = by_class.len();
    let mut sets = vec![DistributionSet::new(classes, protocol.runs_m); streams];
    for run in 0..protocol.runs_m {
        for p in 0..protocol.inputs_p {
            for (class, pool) in by_class.iter().enumerate() {
                let traces = measure(&pool[p], Slot::new(run, p))?;
                for (set, trace) in sets.iter_mut().zip(traces) {
                    set.push_trace(class, run, trace);
                }
            }
        }
    }
    Ok(sets)
}

/// Total-inference distributions for every `(class, run)`. The first
/// `inputs_p` inputs of each class are measured.
pub fn run_protocol(
    model: &ModelSpec,
    by_class: &[Vec<Tensor>],
    protocol: &CollectionProtocol,
    channel: &mut dyn TimingChannel,
) -> Result<DistributionSet> {
    let exclusive = channel.kind().is_wall_clock();
    let mut sets = run_schedule(by_class, protocol, exclusive, 1, |x, slot| {
        Ok(vec![channel.collect_total(
            model,
            x,
            slot,
            protocol.reps_n,
            protocol.warmup,
        )?])
    })?;
    Ok(sets.remove(0))
}

/// Per-layer distributions: element `l` holds layer `l`'s durations.
pub fn run_protocol_layers(
    model: &ModelSpec,
    by_class: &[Vec<Tensor>],
    protocol: &CollectionProtocol,
    channel: &mut dyn TimingChannel,
) -> Result<Vec<DistributionSet>> {
    let exclusive = channel.kind().is_wall_clock();
    run_schedule(
        by_class,
        protocol,
        exclusive,
        model.layers().len(),
        |x, slot| channel.collect_layers(model, x, slot, protocol.reps_n, protocol.warmup),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, PoolVariant, PoolWindow};
    use crate::tensor::Shape;

    fn pool_model(variant: PoolVariant) -> ModelSpec {
        ModelSpec::new(
            Shape::new(vec![1, 2, 2]).unwrap(),
            1,
            vec![
                LayerSpec::MaxPool {
                    window: PoolWindow::square(2, 2, 0),
                    variant,
                },
                LayerSpec::Flatten,
            ],
        )
        .unwrap()
    }

    fn x(v: [f32; 4]) -> Tensor {
        Tensor::from_dims(&[1, 2, 2], v.to_vec()).unwrap()
    }

    #[test]
    fn protocol_validation() {
        assert!(CollectionProtocol::new(0, 1, 1, 0).is_err());
        assert!(CollectionProtocol::new(1, 0, 1, 0).is_err());
        assert!(CollectionProtocol::new(1, 1, 0, 0).is_err());
        assert!(CollectionProtocol::full_scale().validate().is_ok());
        let p = CollectionProtocol::full_scale();
        assert_eq!((p.inputs_p, p.reps_n, p.runs_m), (100, 500, 1000));
    }

    #[test]
    fn surrogate_affine_formula() {
        let mut ch = SurrogateChannel::new(10.0, 1000.0, 0.0, 0).unwrap();
        let m = pool_model(PoolVariant::NaiveBranchy);
        // ascending window: 4 updates
        let t = measure_total(&m, &x([1.0, 2.0, 3.0, 4.0]), &mut ch).unwrap();
        assert_eq!(t, 1040.0);
        let d = measure_total(&m, &x([4.0, 3.0, 2.0, 1.0]), &mut ch).unwrap();
        assert_eq!(d, 1010.0);
        let e = measure_total(&m, &x([9.0, 0.0, 0.0, 0.0]), &mut ch).unwrap();
        assert_eq!(e, d);
    }

    #[test]
    fn surrogate_forty_updates() {
        // Ten 2x2 ascending windows give 40 updates.
        let m = ModelSpec::new(
            Shape::new(vec![10, 2, 2]).unwrap(),
            10,
            vec![
                LayerSpec::MaxPool {
                    window: PoolWindow::square(2, 2, 0),
                    variant: PoolVariant::NaiveBranchy,
                },
                LayerSpec::Flatten,
            ],
        )
        .unwrap();
        let input = Tensor::from_dims(
            &[10, 2, 2],
            (0..40).map(|i| (i % 4) as f32).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut ch = SurrogateChannel::new(10.0, 1000.0, 0.0, 3).unwrap();
        assert_eq!(measure_total(&m, &input, &mut ch).unwrap(), 1400.0);
    }

    #[test]
    fn surrogate_trace_shapes() {
        let m = pool_model(PoolVariant::NaiveBranchy);
        let mut quiet = SurrogateChannel::new(10.0, 1000.0, 0.0, 0).unwrap();
        let t = collect_trace(&m, &x([1.0, 2.0, 3.0, 4.0]), 1, 0, &mut quiet).unwrap();
        assert_eq!(t.len(), 1);
        let t = collect_trace(&m, &x([1.0, 2.0, 3.0, 4.0]), 20, 3, &mut quiet).unwrap();
        assert!(t.samples_ns.iter().all(|&s| s == 1040.0));

        let mut noisy = SurrogateChannel::new(10.0, 5.0, 100.0, 1).unwrap();
        let t = collect_trace(&m, &x([1.0, 2.0, 3.0, 4.0]), 500, 0, &mut noisy).unwrap();
        assert!(t.samples_ns.iter().all(|&s| s >= 1.0));
        assert!(t.samples_ns.iter().any(|&s| s == 1.0));
    }

    #[test]
    fn wall_clock_counts_warmup_inferences() {
        let m = pool_model(PoolVariant::NaiveBranchy);
        let mut ch = WallClockChannel::new();
        let t = collect_trace(&m, &x([1.0, 2.0, 3.0, 4.0]), 10, 5, &mut ch).unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!(ch.inferences(), 15);
        assert!(t.samples_ns.iter().all(|&s| s > 0.0));
    }

    #[test]
    fn schedule_cardinality() {
        let m = pool_model(PoolVariant::NaiveBranchy);
        let by_class = vec![vec![x([1.0, 2.0, 3.0, 4.0])], vec![x([4.0, 3.0, 2.0, 1.0])]];
        let mut ch = SurrogateChannel::new(10.0, 1000.0, 0.0, 0).unwrap();
        let p = CollectionProtocol::new(1, 1, 1, 0).unwrap();
        let set = run_protocol(&m, &by_class, &p, &mut ch).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.map.values().all(|d| d.len() == 1));

        let p = CollectionProtocol::new(3, 2, 4, 1).unwrap();
        assert!(matches!(
            run_protocol(&m, &by_class, &p, &mut ch),
            Err(Error::InsufficientInputs { class: 0, available: 1, required: 2 })
        ));
    }

    #[test]
    fn layer_schedule_has_one_set_per_layer() {
        let m = pool_model(PoolVariant::NaiveBranchy);
        let by_class = vec![vec![x([1.0, 2.0, 3.0, 4.0])], vec![x([4.0, 3.0, 2.0, 1.0])]];
        let mut ch = SurrogateChannel::new(10.0, 1000.0, 0.0, 0).unwrap();
        let p = CollectionProtocol::new(2, 1, 3, 0).unwrap();
        let sets = run_protocol_layers(&m, &by_class, &p, &mut ch).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].get(0, 2).unwrap().flattened(), vec![540.0, 540.0]);
        assert_eq!(sets[0].get(1, 2).unwrap().flattened(), vec![510.0, 510.0]);
        assert_eq!(sets[1].get(1, 0).unwrap().flattened(), vec![500.0, 500.0]);
    }
}
