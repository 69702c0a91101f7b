//! Dense row-major `f64` arrays plus the spectral transforms built on them.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-dimensional array of 64-bit floats in row-major order.
///
/// Model activations use the `[batch, time, channel]` layout; helpers that
/// operate along the time axis assume exactly three dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// A single series laid out as `[1, len, 1]`.
    pub fn series(values: &[f64]) -> Self {
        Tensor {
            shape: vec![1, values.len(), 1],
            data: values.to_vec(),
        }
    }

    /// `rows × cols` matrix lifted to `[1, rows, cols]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Tensor::new(
            vec![1, rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Interpret as `[batch, time, channel]`.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, l, c] => Ok((b, l, c)),
            other => Err(Error::shape(op, format!("expected [batch, time, channel], got {other:?}"))),
        }
    }

    pub fn at3(&self, b: usize, t: usize, c: usize) -> f64 {
        let (l, ch) = (self.shape[1], self.shape[2]);
        self.data[(b * l + t) * ch + c]
    }

    /// Column `c` of batch element `b` as a contiguous series.
    pub fn column(&self, b: usize, c: usize) -> Vec<f64> {
        let (l, ch) = (self.shape[1], self.shape[2]);
        (0..l).map(|t| self.data[(b * l + t) * ch + c]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn ensure_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }
}

/// Complex array stored as separate real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::shape("ComplexTensor::new", "planes disagree with shape"));
        }
        Ok(ComplexTensor { shape, re, im })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    fn to_complex(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&re, &im)| Complex64::new(re, im))
            .collect()
    }

    fn from_complex(buf: &[Complex64]) -> Self {
        ComplexTensor {
            shape: vec![buf.len()],
            re: buf.iter().map(|z| z.re).collect(),
            im: buf.iter().map(|z| z.im).collect(),
        }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// In-place unnormalized forward transform.
pub(crate) fn fft_in_place(buf: &mut [Complex64]) {
    if buf.len() > 1 {
        plan(buf.len(), false).process(buf);
    }
}

/// In-place inverse transform including the `1/L` factor.
pub(crate) fn ifft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    if n > 1 {
        plan(n, true).process(buf);
    }
    let scale = 1.0 / n as f64;
    for z in buf.iter_mut() {
        *z *= scale;
    }
}

/// Unnormalized DFT of a real vector: `F[f] = Σ_t x_t exp(-2πi t f / L)`.
pub fn fft_real(x: &[f64]) -> Result<ComplexTensor> {
    if x.is_empty() {
        return Err(Error::invalid("fft of an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fft_real input".into()));
    }
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf);
    Ok(ComplexTensor::from_complex(&buf))
}

/// Inverse DFT with `1/L` normalization, so `ifft(fft_real(x)) == x`.
pub fn ifft(spectrum: &ComplexTensor) -> Result<ComplexTensor> {
    if spectrum.is_empty() {
        return Err(Error::invalid("ifft of an empty vector"));
    }
    if spectrum.re.iter().chain(&spectrum.im).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ifft input".into()));
    }
    let mut buf = spectrum.to_complex();
    ifft_in_place(&mut buf);
    Ok(ComplexTensor::from_complex(&buf))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_dft(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = x.len();
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for f in 0..n {
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (t * f) as f64 / n as f64;
                re[f] += v * ang.cos();
                im[f] += v * ang.sin();
            }
        }
        (re, im)
    }

    #[test]
    fn fft_zero_constant_impulse() {
        let z = fft_real(&[0.0; 4]).unwrap();
        assert!(z.re().iter().chain(z.im()).all(|&v| v == 0.0));

        let c = fft_real(&[1.0; 4]).unwrap();
        assert!((c.re()[0] - 4.0).abs() < 1e-12);
        for f in 1..4 {
            assert!(c.re()[f].abs() < 1e-12 && c.im()[f].abs() < 1e-12);
        }

        let imp = fft_real(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for f in 0..4 {
            assert!((imp.re()[f] - 1.0).abs() < 1e-12);
            assert!(imp.im()[f].abs() < 1e-12);
        }
    }

    #[test]
    fn fft_matches_direct_dft_for_awkward_lengths() {
        for n in [1usize, 2, 3, 5, 7, 12, 31, 97] {
            let x: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
            let fx = fft_real(&x).unwrap();
            let (re, im) = naive_dft(&x);
            for f in 0..n {
                assert!((fx.re()[f] - re[f]).abs() < 1e-9, "n={n} f={f}");
                assert!((fx.im()[f] - im[f]).abs() < 1e-9, "n={n} f={f}");
            }
        }
    }

    #[test]
    fn ifft_examples() {
        let z = ComplexTensor::new(vec![4], vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert!(ifft(&z).unwrap().re().iter().all(|&v| v == 0.0));

        let x = [3.0, 1.0, 4.0, 1.0];
        let back = ifft(&fft_real(&x).unwrap()).unwrap();
        for (a, b) in back.re().iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(back.im().iter().all(|v| v.abs() < 1e-10));

        let dc = ComplexTensor::new(vec![4], vec![4.0, 0.0, 0.0, 0.0], vec![0.0; 4]).unwrap();
        let ones = ifft(&dc).unwrap();
        assert!(ones.re().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn fft_rejects_empty_and_non_finite() {
        assert!(fft_real(&[]).is_err());
        assert!(fft_real(&[1.0, f64::NAN]).is_err());
        let bad = ComplexTensor::new(vec![1], vec![f64::INFINITY], vec![0.0]).unwrap();
        assert!(ifft(&bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        assert!(s.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let s = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (v, e) in s.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-12);
        }
        assert!(softmax(&[]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_parseval(x in proptest::collection::vec(-10.0f64..10.0, 1..=64)) {
            let fx = fft_real(&x).unwrap();
            let back = ifft(&fx).unwrap();
            for (a, b) in back.re().iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
            prop_assert!(back.im().iter().all(|v| v.abs() <= 1e-10));
            let time: f64 = x.iter().map(|v| v * v).sum();
            let freq: f64 = fx.re().iter().zip(fx.im()).map(|(r, i)| r * r + i * i).sum::<f64>()
                / x.len() as f64;
            prop_assert!((time - freq).abs() <= 1e-9 * time.max(1e-300));
        }

        #[test]
        fn softmax_normalized_and_monotone(x in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let s = softmax(&x).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(s.iter().all(|&v| v >= 0.0));
            for i in 0..x.len() {
                for j in 0..x.len() {
                    if x[i] > x[j] {
                        prop_assert!(s[i] >= s[j]);
                    }
                }
            }
        }
    }
}
