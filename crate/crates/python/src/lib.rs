use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use autoformer::autocorr::{select_topk_delays, topk_count};
use autoformer::data::{generate_synthetic, SyntheticSpec};
use autoformer::model::{AutoformerModel, ModelConfig};
use autoformer::series::{self, CorrelationProfile};
use autoformer::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// `L × d` rows as a `[1, L, d]` tensor.
pub fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor, Error> {
    Tensor::from_rows(rows)
}

pub fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap_or(&1);
    t.data().chunks(d.max(1)).map(<[f64]>::to_vec).collect()
}

/// Split `L × d` rows into `(seasonal, trend)` with an odd window.
#[pyfunction]
fn series_decomp(rows: Vec<Vec<f64>>, window: usize) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let x = rows_to_tensor(&rows).map_err(py_err)?;
    let pair = series::series_decomp(&x, window).map_err(py_err)?;
    Ok((tensor_to_rows(&pair.seasonal), tensor_to_rows(&pair.trend)))
}

#[pyfunction]
fn moving_average(rows: Vec<Vec<f64>>, window: usize) -> PyResult<Vec<Vec<f64>>> {
    let x = rows_to_tensor(&rows).map_err(py_err)?;
    Ok(tensor_to_rows(&series::moving_average(&x, window).map_err(py_err)?))
}

/// Circular cross-correlation `R[τ] = (1/L) Σ_t q[t+τ] k[t]`.
#[pyfunction]
#[pyo3(signature = (q, k, method = "fft"))]
fn autocorr(q: Vec<f64>, k: Vec<f64>, method: &str) -> PyResult<Vec<f64>> {
    let profile = match method {
        "fft" => series::autocorr_fft(&q, &k),
        "bruteforce" => series::autocorr_bruteforce(&q, &k),
        other => return Err(PyValueError::new_err(format!("unknown method `{other}`"))),
    };
    Ok(profile.map_err(py_err)?.values)
}

#[pyfunction]
fn roll(x: Vec<f64>, tau: usize) -> PyResult<Vec<f64>> {
    let t = Tensor::series(&x);
    Ok(series::roll(&t, tau).map_err(py_err)?.into_data())
}

#[pyfunction]
fn topk(factor: f64, length: usize) -> PyResult<usize> {
    topk_count(factor, length).map_err(py_err)
}

/// Top `⌊c·ln L⌋` lags of a profile and their softmax weights.
#[pyfunction]
#[pyo3(signature = (profile, factor = 1.0))]
fn topk_delays(profile: Vec<f64>, factor: f64) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let sel = select_topk_delays(&CorrelationProfile { values: profile }, factor).map_err(py_err)?;
    Ok((sel.delays, sel.weights))
}

#[pyfunction]
#[pyo3(signature = (length, periods, trend_slope = 0.0, noise_sd = 0.0, seed = 0, channels = 1))]
fn synthetic(length: usize, periods: Vec<f64>, trend_slope: f64, noise_sd: f64, seed: u64, channels: usize) -> PyResult<Vec<Vec<f64>>> {
    let frame = generate_synthetic(&SyntheticSpec {
        length,
        channels,
        periods,
        trend_slope,
        noise_sd,
        seed,
    })
    .map_err(py_err)?;
    Ok(frame.values.chunks(channels).map(<[f64]>::to_vec).collect())
}

/// An Autoformer built from a JSON config or loaded from a saved model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: AutoformerModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config_json = "{}"))]
    fn new(config_json: &str) -> PyResult<Self> {
        let cfg = ModelConfig::from_json(config_json).map_err(py_err)?;
        Ok(PyModel {
            inner: AutoformerModel::new(cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: AutoformerModel::load(std::path::Path::new(path)).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(py_err)
    }

    #[getter]
    fn input_len(&self) -> usize {
        self.inner.config().input_len
    }

    #[getter]
    fn pred_len(&self) -> usize {
        self.inner.config().pred_len
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.inner.params().total_elements()
    }

    /// Forecast `O × d` rows from `I × d` values and their time marks.
    fn forecast(&self, x_enc: Vec<Vec<f64>>, marks_enc: Vec<Vec<f64>>, marks_dec: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let t = |rows: &[Vec<f64>]| rows_to_tensor(rows).map_err(py_err);
        let out = self
            .inner
            .autoformer_forward(&t(&x_enc)?, &t(&marks_enc)?, &t(&marks_dec)?)
            .map_err(py_err)?;
        Ok(tensor_to_rows(&out))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(input_len={}, pred_len={}, channels={}, mechanism={})",
            c.input_len, c.pred_len, c.channels, c.mechanism
        )
    }
}

#[pymodule]
fn autoformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(series_decomp, m)?)?;
    m.add_function(wrap_pyfunction!(moving_average, m)?)?;
    m.add_function(wrap_pyfunction!(autocorr, m)?)?;
    m.add_function(wrap_pyfunction!(roll, m)?)?;
    m.add_function(wrap_pyfunction!(topk, m)?)?;
    m.add_function(wrap_pyfunction!(topk_delays, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_conversion_round_trips() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let t = rows_to_tensor(&rows).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2]);
        assert_eq!(tensor_to_rows(&t), rows);
        assert!(rows_to_tensor(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
