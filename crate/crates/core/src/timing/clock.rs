use std::sync::{Mutex, MutexGuard, TryLockError};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, ModelSpec};
use crate::tensor::{Shape, Tensor};

use super::channel::{Slot, TimingChannel, WallClockChannel};

static COLLECTION: Mutex<()> = Mutex::new(());

/// Exclusive right to run a wall-clock collection in this process.
pub struct CollectionGuard {
    _inner: MutexGuard<'static, ()>,
}

impl CollectionGuard {
    /// Blocks until no other collection holds the guard. Pins the calling
    /// thread to its current CPU where the OS allows it.
    pub fn acquire() -> Self {
        let inner = COLLECTION.lock().unwrap_or_else(|p| p.into_inner());
        pin_current_thread();
        CollectionGuard { _inner: inner }
    }

    pub fn try_acquire() -> Result<Self> {
        match COLLECTION.try_lock() {
            Ok(inner) => {
                pin_current_thread();
                Ok(CollectionGuard { _inner: inner })
            }
            Err(TryLockError::Poisoned(p)) => Ok(CollectionGuard {
                _inner: p.into_inner(),
            }),
            Err(TryLockError::WouldBlock) => Err(Error::CollectionBusy),
        }
    }
}

/// Best effort; silently does nothing where affinity cannot be set.
#[cfg(target_os = "linux")]
pub fn pin_current_thread() -> bool {
    // SAFETY: cpu_set_t is plain data; the calls only read/write the set we own.
    unsafe {
        let cpu = libc::sched_getcpu();
        if cpu < 0 {
            return false;
        }
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu as usize, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current_thread() -> bool {
    false
}

/// Smallest positive difference between consecutive monotonic timestamps.
pub fn probe_clock_resolution() -> u64 {
    let mut best = u64::MAX;
    for _ in 0..10_000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b.duration_since(a).as_nanos() as u64);
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterCheck {
    pub clock_resolution_ns: u64,
    pub median_ns: f64,
    pub p5_ns: f64,
    pub p95_ns: f64,
    pub jitter_budget_ns: f64,
    /// Set when the p95 - p5 spread of a no-op inference exceeds the budget.
    pub noisy: bool,
}

pub const DEFAULT_JITTER_BUDGET_NS: f64 = 2_000.0;

fn noop_model() -> ModelSpec {
    ModelSpec::new(
        Shape::new(vec![1]).expect("static shape"),
        1,
        vec![LayerSpec::Flatten],
    )
    .expect("static model")
}

/// Times a no-op model and flags the environment as noisy when the spread
/// is over `jitter_budget_ns`.
pub fn wallclock_self_test(samples: usize, jitter_budget_ns: f64) -> Result<JitterCheck> {
    let model = noop_model();
    let input = Tensor::from_dims(&[1], vec![0.0])?;
    let mut channel = WallClockChannel::new();
    let trace = channel.collect_total(&model, &input, Slot::default(), samples.max(1), 100)?;
    let mut sorted = trace.samples_ns.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
    let (p5, p95) = (q(0.05), q(0.95));
    Ok(JitterCheck {
        clock_resolution_ns: probe_clock_resolution(),
        median_ns: crate::leakage::median(&trace.samples_ns)?,
        p5_ns: p5,
        p95_ns: p95,
        jitter_budget_ns,
        noisy: p95 - p5 > jitter_budget_ns,
    })
}
