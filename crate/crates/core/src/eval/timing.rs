use crate::error::{input, Result};
use crate::nn::Tensor;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    /// Mean per-sample milliseconds over the timed calls.
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Scoring calls issued, warm-up included.
    pub calls: usize,
    pub samples_per_call: usize,
}

/// Times online scoring of `batch` by `score`: `warmup` discarded calls,
/// then `repeats` timed calls, each reported per sample.
pub fn time_detector<F>(mut score: F, batch: &Tensor, warmup: usize, repeats: usize) -> Result<TimingStats>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    if repeats == 0 {
        return input("timing needs at least one repeat");
    }
    let n = batch.batch();
    let mut calls = 0;
    for _ in 0..warmup {
        score(batch)?;
        calls += 1;
    }
    let mut per_sample = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        score(batch)?;
        calls += 1;
        per_sample.push(t.elapsed().as_secs_f64() * 1e3 / n as f64);
    }
    let mean_ms = per_sample.iter().sum::<f64>() / repeats as f64;
    per_sample.sort_by(f64::total_cmp);
    let median_ms = if repeats % 2 == 1 {
        per_sample[repeats / 2]
    } else {
        0.5 * (per_sample[repeats / 2 - 1] + per_sample[repeats / 2])
    };
    Ok(TimingStats { mean_ms, median_ms, calls, samples_per_call: n })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_calls_and_rejects_zero_repeats() {
        let x = Tensor::zeros(vec![4, 2]);
        let mut n = 0;
        let stats = time_detector(
            |b: &Tensor| {
                n += 1;
                Ok(vec![0.0; b.batch()])
            },
            &x,
            3,
            5,
        )
        .unwrap();
        assert_eq!(n, 8);
        assert_eq!(stats.calls, 8);
        assert_eq!(stats.samples_per_call, 4);
        assert!(stats.mean_ms >= 0.0);
        assert!(time_detector(|_: &Tensor| Ok(vec![]), &x, 3, 0).is_err());
    }
}
