//! Series-level primitives: moving-average decomposition, circular roll and
//! circular cross-correlation.
//!
//! Everything here works on `[batch, time, channel]` tensors and acts along
//! the time axis independently for every `(batch, channel)` column.

use std::cell::RefCell;

use realfft::RealFftPlanner;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seasonal and trend-cyclical parts of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompPair {
    pub seasonal: Tensor,
    pub trend: Tensor,
}

/// Circular correlation `R(τ)` for `τ = 0..L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationProfile {
    pub values: Vec<f64>,
}

impl CorrelationProfile {
    pub fn series_length(&self) -> usize {
        self.values.len()
    }

    /// Lag with the largest value inside `range` (first one on ties).
    pub fn argmax_in(&self, range: std::ops::RangeInclusive<usize>) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for tau in range {
            let v = *self.values.get(tau)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((tau, v));
            }
        }
        best.map(|(t, _)| t)
    }
}

pub(crate) fn check_window(w: usize) -> Result<()> {
    if w == 0 {
        return Err(Error::config("moving_avg_window", "window must be at least 1"));
    }
    if w % 2 == 0 {
        return Err(Error::config(
            "moving_avg_window",
            format!("window {w} is even; padding needs an odd window"),
        ));
    }
    Ok(())
}

/// Moving average along time with edge-replicated padding of `(w-1)/2` on
/// both sides; output length equals input length.
///
/// Each window mean is accumulated relative to its centre value, which
/// keeps constant stretches exactly constant.
pub fn moving_average(x: &Tensor, w: usize) -> Result<Tensor> {
    check_window(w)?;
    let (b, l, c) = x.dims3("moving_average")?;
    if l == 0 {
        return Err(Error::invalid("moving_average of an empty series"));
    }
    let mut out = vec![0.0; x.len()];
    moving_average_raw(x.data(), &mut out, b, l, c, w);
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn moving_average_raw(x: &[f64], out: &mut [f64], b: usize, l: usize, c: usize, w: usize) {
    let half = (w - 1) / 2;
    let inv = 1.0 / w as f64;
    for bi in 0..b {
        let base = bi * l * c;
        for t in 0..l {
            let row = base + t * c;
            for ch in 0..c {
                let centre = x[row + ch];
                let mut acc = 0.0;
                for i in 0..w {
                    let j = (t + i).saturating_sub(half).min(l - 1);
                    acc += x[base + j * c + ch] - centre;
                }
                out[row + ch] = centre + acc * inv;
            }
        }
    }
}

/// Adjoint of [`moving_average_raw`]: scatters `g / w` back over each window.
pub(crate) fn moving_average_adjoint(g: &[f64], gin: &mut [f64], b: usize, l: usize, c: usize, w: usize) {
    let half = (w - 1) / 2;
    let inv = 1.0 / w as f64;
    for bi in 0..b {
        let base = bi * l * c;
        for t in 0..l {
            let row = base + t * c;
            for i in 0..w {
                let j = (t + i).saturating_sub(half).min(l - 1);
                let dst = base + j * c;
                for ch in 0..c {
                    gin[dst + ch] += g[row + ch] * inv;
                }
            }
        }
    }
}

/// `trend = moving_average(x, w)`, `seasonal = x - trend`.
pub fn series_decomp(x: &Tensor, w: usize) -> Result<DecompPair> {
    let trend = moving_average(x, w)?;
    let seasonal: Vec<f64> = x.data().iter().zip(trend.data()).map(|(a, t)| a - t).collect();
    Ok(DecompPair {
        seasonal: Tensor::new(x.shape().to_vec(), seasonal)?,
        trend,
    })
}

/// Left circular shift along time: `out[t] = x[(t + tau) mod L]`.
pub fn roll(x: &Tensor, tau: usize) -> Result<Tensor> {
    let (b, l, c) = x.dims3("roll")?;
    if tau >= l {
        return Err(Error::invalid(format!("roll delay {tau} outside [0, {l})")));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for bi in 0..b {
        let base = bi * l * c;
        for t in 0..l {
            let s = base + ((t + tau) % l) * c;
            out.extend_from_slice(&src[s..s + c]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn check_pair(q: &[f64], k: &[f64]) -> Result<()> {
    if q.len() != k.len() {
        return Err(Error::shape(
            "autocorrelation",
            format!("query length {} vs key length {}", q.len(), k.len()),
        ));
    }
    if q.is_empty() {
        return Err(Error::invalid("autocorrelation of empty series"));
    }
    Ok(())
}

/// Direct `O(L²)` circular estimator `R(τ) = (1/L) Σ_t q_t k_{(t-τ) mod L}`.
pub fn autocorr_bruteforce(q: &[f64], k: &[f64]) -> Result<CorrelationProfile> {
    check_pair(q, k)?;
    let l = q.len();
    let values = (0..l)
        .map(|tau| {
            let mut acc = 0.0;
            for t in 0..l {
                acc += q[t] * k[(t + l - tau) % l];
            }
            acc / l as f64
        })
        .collect();
    Ok(CorrelationProfile { values })
}

/// Same estimator through the power spectrum:
/// `R = (1/L) · ifft(fft(q) ⊙ conj(fft(k)))`.
pub fn autocorr_fft(q: &[f64], k: &[f64]) -> Result<CorrelationProfile> {
    check_pair(q, k)?;
    if q.iter().chain(k).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("autocorr_fft input".into()));
    }
    let mut values = vec![0.0; q.len()];
    let mut scratch = Scratch::default();
    correlate_into(q, k, &mut values, &mut scratch);
    Ok(CorrelationProfile { values })
}

thread_local! {
    static REAL_PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

/// Reusable buffers for real-input transforms of one column length.
#[derive(Default)]
pub(crate) struct Scratch {
    x: Vec<f64>,
    a: Vec<Complex64>,
    b: Vec<Complex64>,
    work: Vec<Complex64>,
}

impl Scratch {
    fn load(&mut self, q: &[f64], k: &[f64]) {
        let forward = REAL_PLANNER.with(|p| p.borrow_mut().plan_fft_forward(q.len()));
        self.a.resize(q.len() / 2 + 1, Complex64::default());
        self.b.resize(q.len() / 2 + 1, Complex64::default());
        self.work.resize(forward.get_scratch_len(), Complex64::default());
        for (src, dst) in [(q, &mut self.a), (k, &mut self.b)] {
            self.x.clear();
            self.x.extend_from_slice(src);
            forward
                .process_with_scratch(&mut self.x, dst, &mut self.work)
                .expect("buffer lengths match the plan");
        }
    }

    /// Inverse transform of `a`, scaled by `1/L²`, passed to `emit` per lag.
    fn finish(&mut self, mut emit: impl FnMut(usize, f64)) {
        let n = self.x.len();
        let inverse = REAL_PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n));
        self.a[0].im = 0.0;
        if n % 2 == 0 {
            self.a[n / 2].im = 0.0;
        }
        self.work.resize(inverse.get_scratch_len(), Complex64::default());
        inverse
            .process_with_scratch(&mut self.a, &mut self.x, &mut self.work)
            .expect("buffer lengths match the plan");
        let scale = 1.0 / (n as f64 * n as f64);
        for (t, v) in self.x.iter().enumerate() {
            emit(t, v * scale);
        }
    }
}

/// `out[τ] = (1/L) Σ_t q_{(t+τ) mod L} k_t`.
pub(crate) fn correlate_into(q: &[f64], k: &[f64], out: &mut [f64], s: &mut Scratch) {
    s.load(q, k);
    for (a, b) in s.a.iter_mut().zip(&s.b) {
        *a *= b.conj();
    }
    s.finish(|t, v| out[t] = v);
}

/// `out[s] += (1/L) Σ_τ g_τ k_{(s-τ) mod L}` (circular convolution).
pub(crate) fn convolve_into(g: &[f64], k: &[f64], out: &mut [f64], s: &mut Scratch) {
    s.load(g, k);
    for (a, b) in s.a.iter_mut().zip(&s.b) {
        *a *= b;
    }
    s.finish(|t, v| out[t] += v);
}

/// `[B, L, C]` row-major data rearranged as contiguous `[B, C, L]` columns.
pub(crate) fn channel_major(data: &[f64], b: usize, l: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        let (src, dst) = (&data[bi * l * c..(bi + 1) * l * c], &mut out[bi * l * c..(bi + 1) * l * c]);
        for (t, row) in src.chunks_exact(c).enumerate() {
            for (ch, &x) in row.iter().enumerate() {
                dst[ch * l + t] = x;
            }
        }
    }
    out
}

/// Inverse of [`channel_major`].
pub(crate) fn time_major(data: &[f64], b: usize, l: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bi in 0..b {
        let (src, dst) = (&data[bi * l * c..(bi + 1) * l * c], &mut out[bi * l * c..(bi + 1) * l * c]);
        for (t, row) in dst.chunks_exact_mut(c).enumerate() {
            for (ch, x) in row.iter_mut().enumerate() {
                *x = src[ch * l + t];
            }
        }
    }
    out
}

/// Column-wise correlation of two `[B, L, C]` tensors, same layout out.
pub(crate) fn correlate_columns(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (b, l, c) = q.dims3("correlation")?;
    if k.shape() != q.shape() {
        return Err(Error::shape(
            "correlation",
            format!("{:?} vs {:?}", q.shape(), k.shape()),
        ));
    }
    let (qt, kt) = (channel_major(q.data(), b, l, c), channel_major(k.data(), b, l, c));
    let mut res = vec![0.0; q.len()];
    let mut scratch = Scratch::default();
    for ((qc, kc), rc) in qt.chunks_exact(l).zip(kt.chunks_exact(l)).zip(res.chunks_exact_mut(l)) {
        correlate_into(qc, kc, rc, &mut scratch);
    }
    Tensor::new(q.shape().to_vec(), time_major(&res, b, l, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn moving_average_examples() {
        let c = Tensor::full(&[1, 9, 2], 0.37);
        for w in [1, 3, 5, 25] {
            assert_eq!(moving_average(&c, w).unwrap(), c);
        }
        let x = Tensor::series(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let ma = moving_average(&x, 3).unwrap();
        assert!(close(ma.data(), &[4.0 / 3.0, 2.0, 3.0, 4.0, 14.0 / 3.0], 1e-12));
        let x = Tensor::series(&[0.3, -1.0, 7.5, 2.25]);
        assert_eq!(moving_average(&x, 1).unwrap(), x);
    }

    #[test]
    fn moving_average_rejects_bad_windows() {
        let x = Tensor::series(&[1.0, 2.0]);
        match moving_average(&x, 4) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "moving_avg_window"),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(moving_average(&x, 0).is_err());
    }

    #[test]
    fn decomposition_examples() {
        let c = Tensor::full(&[2, 6, 3], -4.1);
        let pair = series_decomp(&c, 5).unwrap();
        assert!(pair.seasonal.data().iter().all(|&v| v == 0.0));
        assert_eq!(pair.trend, c);

        let x = Tensor::series(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let pair = series_decomp(&x, 3).unwrap();
        assert!(close(pair.seasonal.data(), &[-1.0 / 3.0, 0.0, 0.0, 0.0, 1.0 / 3.0], 1e-12));
    }

    #[test]
    fn roll_examples() {
        let x = Tensor::series(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(roll(&x, 1).unwrap().data(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(roll(&x, 0).unwrap(), x);
        assert!(roll(&x, 4).is_err());
    }

    #[test]
    fn bruteforce_examples() {
        let z = autocorr_bruteforce(&[0.0; 5], &[0.0; 5]).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        let c = autocorr_bruteforce(&[1.5; 6], &[1.5; 6]).unwrap();
        assert!(c.values.iter().all(|&v| (v - 2.25).abs() < 1e-12));
        let imp = autocorr_bruteforce(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(imp.values, vec![0.25, 0.0, 0.0, 0.0]);
        assert!(autocorr_bruteforce(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn fft_path_examples() {
        let z = autocorr_fft(&[0.0; 7], &[0.0; 7]).unwrap();
        assert!(z.values.iter().all(|&v| v == 0.0));
        assert!(autocorr_fft(&[1.0, 2.0], &[1.0]).is_err());

        for p in [5usize, 8, 12] {
            let l = 6 * p;
            let x: Vec<f64> = (0..l)
                .map(|t| (2.0 * std::f64::consts::PI * t as f64 / p as f64).sin())
                .collect();
            let oracle = autocorr_bruteforce(&x, &x).unwrap();
            let fast = autocorr_fft(&x, &x).unwrap();
            assert_eq!(oracle.argmax_in(1..=l / 2), Some(p));
            assert_eq!(fast.argmax_in(1..=l / 2), Some(p));
        }
    }

    #[test]
    fn fft_path_agrees_with_oracle_including_primes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for l in [4usize, 5, 13, 64, 97, 128, 257, 512] {
            for _ in 0..8 {
                let q: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
                let k: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = autocorr_fft(&q, &k).unwrap();
                let b = autocorr_bruteforce(&q, &k).unwrap();
                assert!(close(&a.values, &b.values, 1e-9), "L={l}");
            }
        }
    }

    #[test]
    fn convolution_is_the_adjoint_of_correlation() {
        // <corr(q, k), g> == <q, conv(g, k)>
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = 19;
        let q: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = autocorr_bruteforce(&q, &k).unwrap().values;
        let mut adj = vec![0.0; l];
        convolve_into(&g, &k, &mut adj, &mut Scratch::default());
        let lhs: f64 = r.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = q.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn decomposition_reconstructs_within_rounding(
            vals in proptest::collection::vec(-100.0f64..100.0, 12),
            w in prop_oneof![Just(1usize), Just(3), Just(5), Just(25)],
        ) {
            let x = Tensor::new(vec![1, 6, 2], vals).unwrap();
            let pair = series_decomp(&x, w).unwrap();
            for ((s, t), v) in pair.seasonal.data().iter().zip(pair.trend.data()).zip(x.data()) {
                let scale = s.abs().max(t.abs()).max(v.abs());
                prop_assert!((s + t - v).abs() <= scale * f64::EPSILON);
            }
        }

        #[test]
        fn moving_average_shift_equivariant_in_interior(
            vals in proptest::collection::vec(-5.0f64..5.0, 40),
            shift in 1usize..6,
        ) {
            let w = 5;
            let l = vals.len() - shift;
            let a = Tensor::series(&vals[..l]);
            let b = Tensor::series(&vals[shift..]);
            let ma = moving_average(&a, w).unwrap();
            let mb = moving_average(&b, w).unwrap();
            for t in w..(l - w) {
                if t + shift < l - w {
                    prop_assert!((ma.data()[t + shift] - mb.data()[t]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn roll_composes(vals in proptest::collection::vec(-5.0f64..5.0, 1..20), a in 0usize..40, b in 0usize..40) {
            let l = vals.len();
            let x = Tensor::series(&vals);
            let lhs = roll(&roll(&x, a % l).unwrap(), b % l).unwrap();
            let rhs = roll(&x, (a + b) % l).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn self_correlation_even_and_peaked(vals in proptest::collection::vec(-3.0f64..3.0, 2..80)) {
            let r = autocorr_fft(&vals, &vals).unwrap().values;
            let l = r.len();
            for tau in 1..l {
                prop_assert!((r[tau] - r[l - tau]).abs() <= 1e-9);
                prop_assert!(r[0] + 1e-12 >= r[tau].abs());
            }
        }
    }
}
