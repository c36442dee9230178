//! Wall-clock comparison of one training step under soft and denoised guidance.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::actor::GuidanceMode;
use crate::data::OfflineDataset;
use crate::error::{DacError, Result};
use crate::trainer::{init_state, train_step, TrainConfig};

pub const DEFAULT_BENCH_STEPS: [usize; 5] = [5, 10, 20, 50, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub diffusion_steps: usize,
    pub soft_ms: f64,
    pub denoised_ms: f64,
    /// soft time / denoised time
    pub ratio: f64,
}

/// Mean milliseconds per `train_step` after `warmup` untimed steps.
pub fn time_step(config: &TrainConfig, ds: &OfflineDataset, warmup: usize, iters: usize) -> Result<f64> {
    if iters == 0 {
        return Err(DacError::Range("need at least one timed iteration".into()));
    }
    let mut state = init_state(config, ds)?;
    for _ in 0..warmup {
        train_step(&mut state, ds)?;
    }
    let start = Instant::now();
    for _ in 0..iters {
        train_step(&mut state, ds)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / iters as f64)
}

/// One row per entry of `steps`, timing `base` with each guidance mode.
/// The denoised step back-propagates through the whole batch, so both modes
/// are compared at equal batch size regardless of `base.denoised_samples`.
pub fn bench_steps(base: &TrainConfig, ds: &OfflineDataset, steps: &[usize], warmup: usize, iters: usize) -> Result<Vec<BenchRow>> {
    steps
        .iter()
        .map(|&t| {
            let soft = TrainConfig { diffusion_steps: t, guidance: GuidanceMode::Soft, ..base.clone() };
            let denoised = TrainConfig { guidance: GuidanceMode::Denoised, denoised_samples: 0, ..soft.clone() };
            soft.validate()?;
            let soft_ms = time_step(&soft, ds, warmup, iters)?;
            let denoised_ms = time_step(&denoised, ds, warmup, iters)?;
            Ok(BenchRow { diffusion_steps: t, soft_ms, denoised_ms, ratio: soft_ms / denoised_ms })
        })
        .collect()
}

/// Plain-text table, one line per row.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut out = String::from("T      soft_ms  denoised_ms  ratio\n");
    for r in rows {
        out.push_str(&format!("{:<5} {:>8.3} {:>12.3} {:>6.3}\n", r.diffusion_steps, r.soft_ms, r.denoised_ms, r.ratio));
    }
    out
}

/// True when the ratio is below one at the first entry and strictly decreasing.
pub fn ratio_trend_holds(rows: &[BenchRow]) -> bool {
    !rows.is_empty() && rows[0].ratio < 1.0 && rows.windows(2).all(|w| w[1].ratio < w[0].ratio)
}
