//! Mechanism-only forward timing over a grid of sequence lengths.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autocorr::{autocorrelation_speedup, autocorrelation_standard, full_attention, MechanismKind, Phase};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub mechanism: MechanismKind,
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub d_model: usize,
    pub heads: usize,
    pub factor: f64,
    /// Lengths whose estimated working set exceeds this are reported as null.
    pub memory_budget_bytes: usize,
    /// Each timing sample loops until it covers at least this long.
    pub min_sample: Duration,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(mechanism: MechanismKind, lengths: Vec<usize>) -> Self {
        BenchConfig {
            mechanism,
            lengths,
            repeats: 5,
            d_model: 32,
            heads: 1,
            factor: 1.0,
            memory_budget_bytes: 2 << 30,
            min_sample: Duration::from_millis(5),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    /// Median seconds per forward, or null when skipped for memory.
    pub median_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mechanism: MechanismKind,
    pub d_model: usize,
    pub batch: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log time against log length.
    pub slope: Option<f64>,
}

fn estimated_bytes(kind: MechanismKind, l: usize, d: usize) -> usize {
    let io = 4 * l * d * 8;
    match kind {
        MechanismKind::FullAttention => io + 2 * l * l * 8,
        _ => io * 4,
    }
}

fn run_once(cfg: &BenchConfig, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    match cfg.mechanism {
        MechanismKind::AutocorrSpeedup => autocorrelation_speedup(q, k, v, cfg.factor, Phase::Infer),
        MechanismKind::AutocorrStandard => autocorrelation_standard(q, k, v, cfg.factor),
        MechanismKind::FullAttention => full_attention(q, k, v, cfg.heads),
    }
}

pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.lengths.is_empty() || cfg.lengths.windows(2).any(|w| w[1] <= w[0]) || cfg.lengths[0] < 2 {
        return Err(Error::invalid("bench lengths must be ascending and at least 2"));
    }
    if cfg.repeats == 0 {
        return Err(Error::invalid("bench repeats must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.lengths.len());
    for &l in &cfg.lengths {
        if estimated_bytes(cfg.mechanism, l, cfg.d_model) > cfg.memory_budget_bytes {
            rows.push(BenchRow {
                length: l,
                median_seconds: None,
            });
            continue;
        }
        let mut gen = || {
            let data = (0..l * cfg.d_model).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::new(vec![1, l, cfg.d_model], data)
        };
        let (q, k, v) = (gen()?, gen()?, gen()?);
        run_once(cfg, &q, &k, &v)?;
        let mut samples = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let start = Instant::now();
            let mut iters = 0u32;
            while iters == 0 || start.elapsed() < cfg.min_sample {
                std::hint::black_box(run_once(cfg, &q, &k, &v)?);
                iters += 1;
            }
            samples.push(start.elapsed().as_secs_f64() / iters as f64);
        }
        rows.push(BenchRow {
            length: l,
            median_seconds: Some(median(samples)),
        });
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.median_seconds.map(|t| (r.length as f64, t)))
        .collect();
    Ok(BenchReport {
        mechanism: cfg.mechanism,
        d_model: cfg.d_model,
        batch: 1,
        slope: log_log_slope(&points),
        rows,
    })
}
