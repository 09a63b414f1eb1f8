//! Inference throughput measurement.

use std::time::Instant;

use conformer_tensor::Tensor;
use serde::Serialize;

use crate::config::ConformerConfig;
use crate::error::{Error, Result};
use crate::model::Conformer;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub input_size: usize,
    /// Median over the timed iterations.
    pub images_per_second: f64,
    pub per_iteration: Vec<f64>,
    pub hardware: String,
}

/// Middle element of the sorted values; mean of the two middle ones for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

pub fn hardware_string() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    format!("{cpu}, {} worker threads", rayon::current_num_threads())
}

/// Eval-mode forward throughput on random inputs.
pub fn bench(config: &ConformerConfig, batch: usize, iters: usize, warmup: usize) -> Result<BenchReport> {
    if batch == 0 || iters == 0 {
        return Err(Error::Argument("batch and iterations must be positive".into()));
    }
    let model = Conformer::new(config.clone(), 0)?;
    let s = config.input_size;
    let images = Tensor::from_fn([batch, 3, s, s], |i| ((i * 2_654_435_761) % 1000) as f32 / 500.0 - 1.0);
    for _ in 0..warmup {
        model.logits_chunked(&images, batch)?;
    }
    let mut per_iteration = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        model.logits_chunked(&images, batch)?;
        per_iteration.push(batch as f64 / t0.elapsed().as_secs_f64());
    }
    Ok(BenchReport {
        batch,
        input_size: s,
        images_per_second: median(&per_iteration),
        per_iteration,
        hardware: hardware_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_cases() {
        assert_eq!(median(&[5.0]), 5.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn single_iteration_is_that_measurement() {
        let r = bench(&ConformerConfig::preset("micro").unwrap(), 1, 1, 0).unwrap();
        assert_eq!(r.per_iteration.len(), 1);
        assert_eq!(r.images_per_second, r.per_iteration[0]);
    }
}
