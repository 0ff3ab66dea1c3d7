use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{model_forward, pool_update_counts, LayerSpec, ModelSpec};
use crate::seeds::mix;
use crate::tensor::Tensor;

use super::TimingTrace;

/// Where a measurement sits in the collection schedule: the run instance and
/// the input position within a class. Classes visited back to back in the
/// class-interleaved order share a slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Slot {
    pub run: u64,
    pub index: u64,
}

impl Slot {
    pub fn new(run: usize, index: usize) -> Self {
        Slot {
            run: run as u64,
            index: index as u64,
        }
    }
}

/// Channel descriptor, as stored in configs and report headers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelKind {
    WallClock,
    Surrogate {
        ns_per_update: f64,
        base_ns: f64,
        noise_std_ns: f64,
        seed: u64,
    },
}

impl ChannelKind {
    pub fn default_surrogate(seed: u64) -> Self {
        ChannelKind::Surrogate {
            ns_per_update: 10.0,
            base_ns: 1.0e4,
            noise_std_ns: 50.0,
            seed,
        }
    }

    pub fn is_wall_clock(&self) -> bool {
        matches!(self, ChannelKind::WallClock)
    }

    pub fn validate(&self) -> Result<()> {
        if let ChannelKind::Surrogate {
            ns_per_update,
            base_ns,
            noise_std_ns,
            ..
        } = self
        {
            if [*ns_per_update, *base_ns, *noise_std_ns]
                .iter()
                .any(|v| !(v.is_finite() && *v >= 0.0))
            {
                return Err(Error::InvalidConfig(format!(
                    "surrogate parameters must be finite and >= 0: {self:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn TimingChannel>> {
        self.validate()?;
        Ok(match *self {
            ChannelKind::WallClock => Box::new(WallClockChannel::new()),
            ChannelKind::Surrogate {
                ns_per_update,
                base_ns,
                noise_std_ns,
                seed,
            } => Box::new(SurrogateChannel::new(ns_per_update, base_ns, noise_std_ns, seed)?),
        })
    }
}

/// A source of inference durations.
pub trait TimingChannel {
    /// Runs `warmup + reps` measurements of the whole forward pass and keeps the last `reps`.
    fn collect_total(
        &mut self,
        model: &ModelSpec,
        input: &Tensor,
        slot: Slot,
        reps: usize,
        warmup: usize,
    ) -> Result<TimingTrace>;

    /// Like [`TimingChannel::collect_total`], one trace per layer.
    fn collect_layers(
        &mut self,
        model: &ModelSpec,
        input: &Tensor,
        slot: Slot,
        reps: usize,
        warmup: usize,
    ) -> Result<Vec<TimingTrace>>;

    fn kind(&self) -> ChannelKind;
}

/// Real time around `model_forward`, from the monotonic clock.
#[derive(Debug, Default)]
pub struct WallClockChannel {
    inferences: u64,
}

impl WallClockChannel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forward passes executed so far, warmup included.
    pub fn inferences(&self) -> u64 {
        self.inferences
    }
}

impl TimingChannel for WallClockChannel {
    fn collect_total(
        &mut self,
        model: &ModelSpec,
        input: &Tensor,
        _slot: Slot,
        reps: usize,
        warmup: usize,
    ) -> Result<TimingTrace> {
        let mut samples = Vec::with_capacity(reps);
        for rep in 0..warmup + reps {
            let t1 = Instant::now();
            let out = model_forward(model, black_box(input), false)?;
            let t2 = Instant::now();
            black_box(&out);
            self.inferences += 1;
            if rep >= warmup {
                samples.push(t2.duration_since(t1).as_nanos().max(1) as f64);
            }
        }
        TimingTrace::new(samples)
    }

    fn collect_layers(
        &mut self,
        model: &ModelSpec,
        input: &Tensor,
        _slot: Slot,
        reps: usize,
        warmup: usize,
    ) -> Result<Vec<TimingTrace>> {
        let mut per_layer = vec![Vec::with_capacity(reps); model.layers().len()];
        for rep in 0..warmup + reps {
            let out = model_forward(model, black_box(input), true)?;
            self.inferences += 1;
            if rep >= warmup {
                for (dst, &t) in per_layer.iter_mut().zip(&out.layer_times_ns) {
                    dst.push(t.max(1) as f64);
                }
            }
        }
        per_layer.into_iter().map(TimingTrace::new).collect()
    }

    fn kind(&self) -> ChannelKind {
        ChannelKind::WallClock
    }
}

/// Deterministic stand-in for inference time:
/// `base + ns_per_update * (max-pool update count) + noise`, floored at 1 ns.
///
/// The noise is a seeded Gaussian keyed by schedule slot and repetition, not
/// by input or model, so it models environment state at measurement time.
/// The forward pass is deterministic, so each trace runs it once and reuses
/// the update count for all repetitions.
#[derive(Debug, Clone)]
pub struct SurrogateChannel {
    ns_per_update: f64,
    base_ns: f64,
    noise: Option<Normal<f64>>,
    noise_std_ns: f64,
    seed: u64,
}

impl SurrogateChannel {
    pub fn new(ns_per_update: f64, base_ns: f64, noise_std_ns: f64, seed: u64) -> Result<Self> {
        let kind = ChannelKind::Surrogate {
            ns_per_update,
            base_ns,
            noise_std_ns,
            seed,
        };
        kind.validate()?;
        let noise = (noise_std_ns > 0.0)
            .then(|| Normal::new(0.0, noise_std_ns))
            .transpose()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(SurrogateChannel {
            ns_per_update,
            base_ns,
            noise,
            noise_std_ns,
            seed,
        })
    }

    fn slot_rng(&self, slot: Slot) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(mix(&[slot.run, slot.index]));
        rng
    }

    fn sample(&self, rng: &mut ChaCha8Rng, deterministic: f64) -> f64 {
        let noise = self.noise.map_or(0.0, |n| n.sample(rng));
        (deterministic + noise).max(1.0)
    }

    /// Noise-free duration for a given total update count.
    pub fn expected_ns(&self, updates: u64) -> f64 {
        self.base_ns + self.ns_per_update * updates as f64
    }
}

impl TimingChannel for SurrogateChannel {
    fn collect_total(
        &mut self,
        model: &ModelSpec,
        input: &Tensor,
        slot: Slot,
        reps: usize,
        warmup: usize,
    ) -> Result<TimingTrace> {
        let updates: u64 = pool_update_counts(model, input)?.iter().sum();
        let mean = self.expected_ns(updates);
        let mut rng = self.slot_rng(slot);
        let mut samples = Vec::with_capacity(reps);
        for rep in 0..warmup + reps {
            let v = self.sample(&mut rng, mean);
            if rep >= warmup {
                samples.push(v);
            }
        }
        TimingTrace::new(samples)
    }

    fn collect_layers(
        &mut self,
        model: &ModelSpec,
        input: &Tensor,
        slot: Slot,
        reps: usize,
        warmup: usize,
    ) -> Result<Vec<TimingTrace>> {
        let out = model_forward(model, input, false)?;
        let layers = model.layers();
        let share = self.base_ns / layers.len().max(1) as f64;
        let mut pool_counts = out.branch_not_taken.iter();
        let means: Vec<f64> = layers
            .iter()
            .map(|l| match l {
                LayerSpec::MaxPool { .. } => {
                    share + self.ns_per_update * *pool_counts.next().unwrap_or(&0) as f64
                }
                _ => share,
            })
            .collect();
        let mut rng = self.slot_rng(slot);
        let mut per_layer = vec![Vec::with_capacity(reps); layers.len()];
        for rep in 0..warmup + reps {
            for (dst, &mean) in per_layer.iter_mut().zip(&means) {
                let v = self.sample(&mut rng, mean);
                if rep >= warmup {
                    dst.push(v);
                }
            }
        }
        per_layer.into_iter().map(TimingTrace::new).collect()
    }

    fn kind(&self) -> ChannelKind {
        ChannelKind::Surrogate {
            ns_per_update: self.ns_per_update,
            base_ns: self.base_ns,
            noise_std_ns: self.noise_std_ns,
            seed: self.seed,
        }
    }
}

/// One duration for one inference.
pub fn measure_total(model: &ModelSpec, input: &Tensor, channel: &mut dyn TimingChannel) -> Result<f64> {
    Ok(channel
        .collect_total(model, input, Slot::default(), 1, 0)?
        .samples_ns[0])
}

/// Per-layer durations of one instrumented inference on the monotonic clock.
pub fn measure_layers(model: &ModelSpec, input: &Tensor) -> Result<Vec<u64>> {
    Ok(model_forward(model, input, true)?.layer_times_ns)
}

/// Warmup repetitions are executed and discarded; `reps` samples are returned in order.
pub fn collect_trace(
    model: &ModelSpec,
    input: &Tensor,
    reps: usize,
    warmup: usize,
    channel: &mut dyn TimingChannel,
) -> Result<TimingTrace> {
    if reps == 0 {
        return Err(Error::InvalidConfig("repetitions must be >= 1".into()));
    }
    channel.collect_total(model, input, Slot::default(), reps, warmup)
}
