//! Wall-clock inference timing.

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use exitprint_core::verify::{CostModel, Meter, TimingBackend};
use exitprint_core::{ExitPolicy, MultiExitModel, Result, Tensor};

static SESSION: Mutex<()> = Mutex::new(());

/// Exclusive measurement session. Only one wall-clock measurement runs at a
/// time in this process.
fn session() -> MutexGuard<'static, ()> {
    SESSION.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Mean seconds per sample over `repeats` runs after `warmup_runs` untimed
/// runs.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    pub repeats: usize,
    pub warmup_runs: usize,
}

impl Default for WallClock {
    fn default() -> Self {
        Self {
            repeats: 10,
            warmup_runs: 3,
        }
    }
}

impl Meter for WallClock {
    fn backend(&self) -> TimingBackend {
        TimingBackend::WallClock {
            repeats: self.repeats,
            warmup_runs: self.warmup_runs,
        }
    }

    fn measure(&mut self, model: &MultiExitModel, samples: &[Tensor<f32>], policy: &ExitPolicy) -> Result<Vec<f64>> {
        let _guard = session();
        let repeats = self.repeats.max(1);
        samples
            .iter()
            .map(|x| {
                for _ in 0..self.warmup_runs {
                    std::hint::black_box(model.early_exit_infer(x, policy)?);
                }
                let start = Instant::now();
                for _ in 0..repeats {
                    std::hint::black_box(model.early_exit_infer(x, policy)?);
                }
                Ok(start.elapsed().as_secs_f64() / repeats as f64)
            })
            .collect()
    }
}

/// The meter for a configured backend.
pub fn meter(backend: TimingBackend) -> Box<dyn Meter> {
    match backend {
        TimingBackend::CostModel => Box::new(CostModel),
        TimingBackend::WallClock { repeats, warmup_runs } => Box::new(WallClock { repeats, warmup_runs }),
    }
}
