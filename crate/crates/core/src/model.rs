//! Encoder/decoder assembly with progressive decomposition.
//!
//! Tensor layout is `[batch, time, channel]` throughout. The encoder sees
//! `I` steps; the decoder runs over `⌊I/2⌋ + O` steps whose first half is
//! the decomposed latter half of the input and whose tail is the
//! placeholder horizon that becomes the forecast.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autocorr::{topk_count, AttentionProjections, MechanismKind};
use crate::error::{Error, Result};
use crate::params::{Forward, Linear, ParamStore};
use crate::series::{self, check_window};
use crate::tape::Var;
use crate::tensor::Tensor;

fn default_input_len() -> usize {
    96
}
fn default_pred_len() -> usize {
    96
}
fn default_one() -> usize {
    1
}
fn default_d_model() -> usize {
    512
}
fn default_heads() -> usize {
    8
}
fn default_e_layers() -> usize {
    2
}
fn default_factor() -> f64 {
    1.0
}
fn default_window() -> usize {
    25
}
fn default_mechanism() -> MechanismKind {
    MechanismKind::AutocorrSpeedup
}

/// Architecture hyper-parameters. JSON keys are the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_input_len")]
    pub input_len: usize,
    #[serde(default = "default_pred_len")]
    pub pred_len: usize,
    #[serde(default = "default_one")]
    pub channels: usize,
    #[serde(default = "default_one")]
    pub time_channels: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_e_layers")]
    pub e_layers: usize,
    #[serde(default = "default_one")]
    pub d_layers: usize,
    #[serde(default = "default_factor")]
    pub factor: f64,
    #[serde(default = "default_window")]
    pub moving_avg_window: usize,
    /// Feed-forward width; `4 · d_model` when absent.
    #[serde(default)]
    pub d_ff: Option<usize>,
    #[serde(default = "default_mechanism")]
    pub mechanism: MechanismKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl ModelConfig {
    /// The gradient-check configuration: I=16, O=8, d=2, d_model=8, h=2,
    /// one encoder and one decoder layer, c=1, w=5.
    pub fn tiny() -> Self {
        ModelConfig {
            input_len: 16,
            pred_len: 8,
            channels: 2,
            time_channels: 1,
            d_model: 8,
            n_heads: 2,
            e_layers: 1,
            d_layers: 1,
            factor: 1.0,
            moving_avg_window: 5,
            d_ff: None,
            mechanism: MechanismKind::AutocorrSpeedup,
            seed: 7,
            dropout: 0.0,
        }
    }

    /// Parses and validates a JSON config; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ff_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn label_len(&self) -> usize {
        self.input_len / 2
    }

    pub fn decoder_len(&self) -> usize {
        self.label_len() + self.pred_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len < 2 {
            return Err(Error::config("input_len", "must be at least 2"));
        }
        if self.pred_len < 1 {
            return Err(Error::config("pred_len", "must be at least 1"));
        }
        if self.channels < 1 {
            return Err(Error::config("channels", "must be at least 1"));
        }
        if self.time_channels < 1 {
            return Err(Error::config("time_channels", "must be at least 1"));
        }
        if self.d_model < 1 {
            return Err(Error::config("d_model", "must be at least 1"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if self.ff_width() < 1 {
            return Err(Error::config("d_ff", "must be at least 1"));
        }
        check_window(self.moving_avg_window)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} is outside [0, 1)", self.dropout)));
        }
        if !(self.factor > 0.0) {
            return Err(Error::config("factor", "must be positive"));
        }
        let shortest = self.input_len.min(self.decoder_len());
        topk_count(self.factor, shortest).map_err(|e| Error::config("factor", e.to_string()))?;
        Ok(())
    }
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("{detail} (stage: {stage})"),
        },
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (stage: {stage})")),
        other => other,
    })
}

/// One mini-batch of model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[B, I, d]`
    pub x_enc: Tensor,
    /// `[B, I, d_time]`
    pub marks_enc: Tensor,
    /// `[B, ⌊I/2⌋ + O, d_time]`
    pub marks_dec: Tensor,
}

/// Seasonal and trend decoder initialisation:
/// `X_des = [seasonal(x[I/2:]); 0]`, `X_det = [trend(x[I/2:]); mean(x[I/2:])]`.
pub fn init_decoder_inputs(x_enc: &Tensor, pred_len: usize, w: usize) -> Result<(Tensor, Tensor)> {
    let (b, i_len, d) = x_enc.dims3("init_decoder_inputs")?;
    if i_len < 2 {
        return Err(Error::invalid("decoder initialisation needs an input of at least 2 steps"));
    }
    let half = i_len / 2;
    let start = i_len - half;
    let mut latter = Vec::with_capacity(b * half * d);
    for bi in 0..b {
        latter.extend_from_slice(&x_enc.data()[(bi * i_len + start) * d..(bi + 1) * i_len * d]);
    }
    let latter = Tensor::new(vec![b, half, d], latter)?;
    let pair = series::series_decomp(&latter, w)?;
    let total = half + pred_len;
    let mut seasonal = vec![0.0; b * total * d];
    let mut trend = vec![0.0; b * total * d];
    for bi in 0..b {
        let src = bi * half * d..(bi + 1) * half * d;
        seasonal[bi * total * d..(bi * total + half) * d].copy_from_slice(&pair.seasonal.data()[src.clone()]);
        trend[bi * total * d..(bi * total + half) * d].copy_from_slice(&pair.trend.data()[src]);
        for ch in 0..d {
            let first = latter.at3(bi, 0, ch);
            let offset: f64 = (0..half).map(|t| latter.at3(bi, t, ch) - first).sum();
            let mean = first + offset / half as f64;
            for t in half..total {
                trend[(bi * total + t) * d + ch] = mean;
            }
        }
    }
    Ok((
        Tensor::new(vec![b, total, d], seasonal)?,
        Tensor::new(vec![b, total, d], trend)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, true, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, true, rng),
        }
    }

    fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(f, x)?;
        let h = f.tape.relu(h)?;
        let h = f.dropout(h)?;
        let y = self.down.forward(f, h)?;
        f.dropout(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderLayer {
    attention: AttentionProjections,
    ffn: FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderLayer {
    self_attention: AttentionProjections,
    cross_attention: AttentionProjections,
    ffn: FeedForward,
    trend_projections: [Linear; 3],
}

/// Per-forward instrumentation used by tests and diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub trend_init: Option<Tensor>,
    /// Sum of the three projected trends per decoder layer.
    pub trend_contributions: Vec<Tensor>,
    pub trend_final: Option<Tensor>,
    /// Largest `|seasonal + trend − input|` over every in-network decomposition.
    pub max_decomp_residual: f64,
    pub decompositions: usize,
}

pub struct AutoformerModel {
    config: ModelConfig,
    params: ParamStore,
    value_embedding: Linear,
    time_embedding: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    projection: Linear,
}

impl std::fmt::Debug for AutoformerModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AutoformerModel")
            .field("config", &self.config)
            .field("parameters", &self.params.total_elements())
            .finish()
    }
}

impl Clone for AutoformerModel {
    fn clone(&self) -> Self {
        AutoformerModel {
            config: self.config.clone(),
            params: self.params.clone(),
            value_embedding: self.value_embedding,
            time_embedding: self.time_embedding,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            projection: self.projection,
        }
    }
}

impl AutoformerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let (d, dm, h, c) = (config.channels, config.d_model, config.n_heads, config.factor);
        let kind = config.mechanism;
        let value_embedding = Linear::new(&mut p, "embedding.value", d, dm, true, &mut rng);
        let time_embedding = Linear::new(&mut p, "embedding.time", config.time_channels, dm, false, &mut rng);
        let mut encoder = Vec::with_capacity(config.e_layers);
        for l in 0..config.e_layers {
            encoder.push(EncoderLayer {
                attention: AttentionProjections::new(&mut p, &format!("encoder.{l}.attention"), dm, h, kind, c, &mut rng)?,
                ffn: FeedForward::new(&mut p, &format!("encoder.{l}.ffn"), dm, config.ff_width(), &mut rng),
            });
        }
        let mut decoder = Vec::with_capacity(config.d_layers);
        for l in 0..config.d_layers {
            let name = format!("decoder.{l}");
            decoder.push(DecoderLayer {
                self_attention: AttentionProjections::new(&mut p, &format!("{name}.self_attention"), dm, h, kind, c, &mut rng)?,
                cross_attention: AttentionProjections::new(&mut p, &format!("{name}.cross_attention"), dm, h, kind, c, &mut rng)?,
                ffn: FeedForward::new(&mut p, &format!("{name}.ffn"), dm, config.ff_width(), &mut rng),
                trend_projections: [1, 2, 3].map(|i| Linear::new(&mut p, &format!("{name}.trend.{i}"), dm, d, false, &mut rng)),
            });
        }
        let projection = Linear::new(&mut p, "projection", dm, d, true, &mut rng);
        Ok(AutoformerModel {
            config,
            params: p,
            value_embedding,
            time_embedding,
            encoder,
            decoder,
            projection,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `value_linear(values) + time_linear(marks)`; no positional term.
    pub fn embed(&self, f: &mut Forward<'_>, values: Var, marks: Var) -> Result<Var> {
        let (vl, ml) = (f.tape.value(values).shape()[1], f.tape.value(marks).shape()[1]);
        if vl != ml {
            return Err(Error::shape("embed", format!("{vl} value steps vs {ml} time-mark steps")));
        }
        let v = self.value_embedding.forward(f, values)?;
        let t = self.time_embedding.forward(f, marks)?;
        let e = f.tape.add(v, t)?;
        f.dropout(e)
    }

    fn decomp(&self, f: &mut Forward<'_>, x: Var, trace: &mut Option<&mut ForwardTrace>) -> Result<(Var, Var)> {
        let (s, t) = f.tape.series_decomp(x, self.config.moving_avg_window)?;
        if let Some(tr) = trace.as_deref_mut() {
            let (xv, sv, tv) = (f.tape.value(x), f.tape.value(s), f.tape.value(t));
            let worst = xv
                .data()
                .iter()
                .zip(sv.data().iter().zip(tv.data()))
                .map(|(x, (s, t))| (s + t - x).abs())
                .fold(0.0, f64::max);
            tr.max_decomp_residual = tr.max_decomp_residual.max(worst);
            tr.decompositions += 1;
        }
        Ok((s, t))
    }

    pub fn encoder_layer_forward(&self, f: &mut Forward<'_>, layer: usize, x: Var) -> Result<Var> {
        self.encoder_layer(f, &self.encoder[layer], x, &mut None)
    }

    fn encoder_layer(&self, f: &mut Forward<'_>, layer: &EncoderLayer, x: Var, trace: &mut Option<&mut ForwardTrace>) -> Result<Var> {
        let a = layer.attention.forward(f, x, None)?;
        let a = f.dropout(a)?;
        let r = f.tape.add(a, x)?;
        let (s1, _) = self.decomp(f, r, trace)?;
        let y = layer.ffn.forward(f, s1)?;
        let r = f.tape.add(y, s1)?;
        let (s2, _) = self.decomp(f, r, trace)?;
        Ok(s2)
    }

    /// Returns `(seasonal_out, trend_out)` for decoder layer `layer`.
    pub fn decoder_layer_forward(&self, f: &mut Forward<'_>, layer: usize, x: Var, cross: Var, trend_in: Var) -> Result<(Var, Var)> {
        self.decoder_layer(f, &self.decoder[layer], x, cross, trend_in, &mut None)
    }

    fn decoder_layer(
        &self,
        f: &mut Forward<'_>,
        layer: &DecoderLayer,
        x: Var,
        cross: Var,
        trend_in: Var,
        trace: &mut Option<&mut ForwardTrace>,
    ) -> Result<(Var, Var)> {
        let a = layer.self_attention.forward(f, x, None)?;
        let a = f.dropout(a)?;
        let r = f.tape.add(x, a)?;
        let (s1, t1) = self.decomp(f, r, trace)?;
        let b = layer.cross_attention.forward(f, s1, Some(cross))?;
        let b = f.dropout(b)?;
        let r = f.tape.add(s1, b)?;
        let (s2, t2) = self.decomp(f, r, trace)?;
        let y = layer.ffn.forward(f, s2)?;
        let r = f.tape.add(s2, y)?;
        let (s3, t3) = self.decomp(f, r, trace)?;

        let p1 = layer.trend_projections[0].forward(f, t1)?;
        let p2 = layer.trend_projections[1].forward(f, t2)?;
        let p3 = layer.trend_projections[2].forward(f, t3)?;
        let contrib = f.tape.add(p1, p2)?;
        let contrib = f.tape.add(contrib, p3)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.trend_contributions.push(f.tape.value(contrib).clone());
        }
        let trend_out = f.tape.add(trend_in, contrib)?;
        Ok((s3, trend_out))
    }

    fn check_batch(&self, batch: &Batch) -> Result<usize> {
        let cfg = &self.config;
        let (b, i_len, d) = batch.x_enc.dims3("model input")?;
        let expect = |name: &str, got: &[usize], want: [usize; 3]| -> Result<()> {
            if got != want {
                return Err(Error::shape("model input", format!("{name} has shape {got:?}, expected {want:?}")));
            }
            Ok(())
        };
        expect("encoder values", &[b, i_len, d], [b, cfg.input_len, cfg.channels])?;
        expect("encoder marks", batch.marks_enc.shape(), [b, cfg.input_len, cfg.time_channels])?;
        expect("decoder marks", batch.marks_dec.shape(), [b, cfg.decoder_len(), cfg.time_channels])?;
        if !batch.x_enc.is_finite() || !batch.marks_enc.is_finite() || !batch.marks_dec.is_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(b)
    }

    /// Full pipeline on the tape; returns the `[B, O, d]` forecast.
    pub fn forward(&self, f: &mut Forward<'_>, batch: &Batch) -> Result<Var> {
        self.forward_traced(f, batch, None)
    }

    pub fn forward_traced(&self, f: &mut Forward<'_>, batch: &Batch, mut trace: Option<&mut ForwardTrace>) -> Result<Var> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (seasonal_init, trend_init) = staged(
            "decoder init",
            init_decoder_inputs(&batch.x_enc, cfg.pred_len, cfg.moving_avg_window),
        )?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.trend_init = Some(trend_init.clone());
        }

        let x = f.tape.constant(batch.x_enc.clone());
        let marks = f.tape.constant(batch.marks_enc.clone());
        let mut enc = staged("encoder embedding", self.embed(f, x, marks))?;
        for (i, layer) in self.encoder.iter().enumerate() {
            enc = staged(&format!("encoder layer {i}"), self.encoder_layer(f, layer, enc, &mut trace))?;
        }

        let xs = f.tape.constant(seasonal_init);
        let marks_dec = f.tape.constant(batch.marks_dec.clone());
        let mut dec = staged("decoder embedding", self.embed(f, xs, marks_dec))?;
        let mut trend = f.tape.constant(trend_init);
        for (i, layer) in self.decoder.iter().enumerate() {
            let (s, t) = staged(
                &format!("decoder layer {i}"),
                self.decoder_layer(f, layer, dec, enc, trend, &mut trace),
            )?;
            dec = s;
            trend = t;
        }
        if let Some(tr) = trace.as_deref_mut() {
            tr.trend_final = Some(f.tape.value(trend).clone());
        }
        let seasonal = staged("output projection", self.projection.forward(f, dec))?;
        let full = staged("output", f.tape.add(seasonal, trend))?;
        staged("output", f.tape.slice_time(full, cfg.label_len(), cfg.pred_len))
    }

    /// Inference-phase forecast `[B, O, d]`.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        let mut f = Forward::infer(&self.params);
        let out = self.forward(&mut f, batch)?;
        Ok(f.tape.value(out).clone())
    }

    /// Inference for a single window given as `I × d` rows.
    pub fn autoformer_forward(&self, x_enc: &Tensor, marks_enc: &Tensor, marks_dec: &Tensor) -> Result<Tensor> {
        let lift = |t: &Tensor| -> Result<Tensor> {
            match t.shape() {
                &[l, c] => t.clone().reshape(vec![1, l, c]),
                _ => Ok(t.clone()),
            }
        };
        let batch = Batch {
            x_enc: lift(x_enc)?,
            marks_enc: lift(marks_enc)?,
            marks_dec: lift(marks_dec)?,
        };
        let out = self.predict(&batch)?;
        let (_, o, d) = out.dims3("prediction")?;
        out.reshape(vec![o, d])
    }

    /// Training-phase MSE and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &Batch, target: &Tensor, dropout_seed: u64) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut f = Forward::train(&self.params, self.config.dropout, dropout_seed);
        let pred = self.forward(&mut f, batch)?;
        let loss = f.tape.mse(pred, target)?;
        let value = f.tape.value(loss).data()[0];
        let grads = f.param_grads(loss)?;
        Ok((value, grads))
    }

    pub fn to_json(&self) -> Result<String> {
        let parameters: BTreeMap<&str, StoredTensor> = self
            .params
            .iter()
            .map(|(name, t)| {
                (
                    name,
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        let doc = serde_json::json!({ "config": self.config, "parameters": parameters });
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: StoredModel = serde_json::from_str(text)?;
        let mut model = AutoformerModel::new(doc.config)?;
        let named: Result<HashMap<String, Tensor>> = doc
            .parameters
            .into_iter()
            .map(|(k, v)| Ok((k, Tensor::new(v.shape, v.values)?)))
            .collect();
        model.params.load_values(&named?)?;
        if model.params.values().iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("stored parameters contain non-finite values".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredModel {
    config: ModelConfig,
    parameters: BTreeMap<String, StoredTensor>,
}
