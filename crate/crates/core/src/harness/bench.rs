//! Forward-pass latency measurement.

use std::time::Instant;

use crate::error::{bail, Result};
use crate::model::{build_model, infer, ModelConfig};
use crate::ops::parallel;
use crate::rng::Rng;
use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub threads: usize,
    /// Per-iteration wall-clock latency in milliseconds, in run order.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(threads: usize, samples_ms: Vec<f64>) -> Result<Self> {
        if samples_ms.is_empty() {
            bail!(Config, "benchmark needs at least one timed iteration");
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let var = samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        // nearest-rank percentiles
        let pct = |p: f64| sorted[((p * n).ceil() as usize).clamp(1, sorted.len()) - 1];
        Ok(LatencyStats { threads, mean_ms: mean, std_ms: var.sqrt(), p50_ms: pct(0.5), p90_ms: pct(0.9), samples_ms })
    }
}

impl std::fmt::Display for LatencyStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "threads={} iters={} mean={:.3}ms std={:.3}ms p50={:.3}ms p90={:.3}ms",
            self.threads,
            self.samples_ms.len(),
            self.mean_ms,
            self.std_ms,
            self.p50_ms,
            self.p90_ms
        )
    }
}

/// Times eval-mode forward passes of a freshly initialized model on a
/// random `[batch, 3, h, w]` input with `threads` operator threads
/// (0 = sequential). The previous thread setting is restored afterwards.
pub fn benchmark_forward(
    cfg: &ModelConfig,
    batch: usize,
    h: usize,
    w: usize,
    warmup: usize,
    iters: usize,
    threads: usize,
) -> Result<LatencyStats> {
    if iters == 0 {
        bail!(Config, "benchmark needs at least one timed iteration");
    }
    let mut params = build_model::<f32>(cfg, 0)?;
    let x = Rng::new(1).uniform_tensor(Shape::new(batch.max(1), 3, h, w), 0.0, 1.0);
    let previous = parallel::threads();
    parallel::set_threads(threads);
    let result = (|| {
        for _ in 0..warmup {
            infer(cfg, &mut params, &x)?;
        }
        let mut samples = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t = Instant::now();
            infer(cfg, &mut params, &x)?;
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(samples)
    })();
    parallel::set_threads(previous);
    LatencyStats::from_samples(threads, result?)
}
