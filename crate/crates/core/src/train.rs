//! L2 training with Adam and validation-based early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{collate, WindowSample};
use crate::error::{Error, Result};
use crate::model::AutoformerModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    10
}
fn default_patience() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be positive"));
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::config("patience", "must be in 1..=max_epochs"));
        }
        Ok(())
    }
}

fn check_pair(op: &'static str, pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    if pred.is_empty() {
        return Err(Error::shape(op, "empty tensors"));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair("mse", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_pair("mae", pred, target)?;
    let s: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.values().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam_step", "gradient or moment count differs from parameter count"));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.len() != params.get(id).len() || state.m[id.index()].len() != g.len() {
            return Err(Error::shape("adam_step", format!("gradient for {} has the wrong length", params.name(id))));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at element {i}", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        let g = &grads[id.index()];
        for (((p, m), v), &g) in params.get_mut(id).data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Forecast metrics over a window set, in normalised units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub n_windows: usize,
}

/// Inference over `windows` in order, `batch_size` at a time.
pub fn evaluate(model: &AutoformerModel, windows: &[WindowSample], batch_size: usize) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::invalid("no windows to evaluate"));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let (batch, target) = collate(&refs)?;
        let pred = model.predict(&batch)?;
        check_pair("evaluate", &pred, &target)?;
        for (p, t) in pred.data().iter().zip(target.data()) {
            se += (p - t) * (p - t);
            ae += (p - t).abs();
        }
        n += pred.len();
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
        n_windows: windows.len(),
    })
}

/// Metrics of the last-value persistence forecast on the same windows.
pub fn persistence_metrics(windows: &[WindowSample]) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::invalid("no windows to evaluate"));
    }
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for w in windows {
        let p = w.persistence();
        for (p, t) in p.data().iter().zip(w.target.data()) {
            se += (p - t) * (p - t);
            ae += (p - t).abs();
        }
        n += w.target.len();
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
        n_windows: windows.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best-validation epoch.
    pub model: AutoformerModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

pub fn train(model: AutoformerModel, train_windows: &[WindowSample], val_windows: &[WindowSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, train_windows, val_windows, cfg, |_| {})
}

/// As [`train`], calling `on_epoch` after each epoch.
pub fn train_with(
    mut model: AutoformerModel,
    train_windows: &[WindowSample],
    val_windows: &[WindowSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Data("training and validation window sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&WindowSample> = idx.iter().map(|&i| &train_windows[i]).collect();
            let (batch, target) = collate(&refs)?;
            let dropout_seed: u64 = rng.random();
            let (loss, grads) = model.loss_and_grads(&batch, &target, dropout_seed).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} in epoch {epoch}, batch {bi}")),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss in epoch {epoch}, batch {bi}")));
            }
            adam_step(model.params_mut(), &grads, &mut adam, cfg.learning_rate).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} in epoch {epoch}, batch {bi}")),
                other => other,
            })?;
            loss_sum += loss * refs.len() as f64;
            count += refs.len();
        }
        let val = evaluate(&model, val_windows, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_mse: loss_sum / count as f64,
            val_mse: val.mse,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);

        let improved = best.as_ref().is_none_or(|(b, _, _)| val.mse < *b);
        if improved {
            best = Some((val.mse, epoch, model.params().clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    let (best_val_mse, best_epoch, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_mse,
        stopped_early,
    })
}
