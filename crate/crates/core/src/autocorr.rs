//! Auto-Correlation: period-based delay selection and time-delay
//! aggregation, in the standard (per-channel lags) and speedup (one global
//! lag set) forms, plus full dot-product attention as the ablation
//! reference.
//!
//! Lags are discrete choices and carry no gradient. Gradients reach the
//! queries and keys through the softmax over the selected correlation
//! values, and reach the values through the aggregation itself.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Forward, Linear, ParamStore};
use crate::series::{self, CorrelationProfile};
use crate::tape::{GradientTape, Var};
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MechanismKind {
    AutocorrStandard,
    AutocorrSpeedup,
    FullAttention,
}

impl MechanismKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MechanismKind::AutocorrStandard => "autocorr_standard",
            MechanismKind::AutocorrSpeedup => "autocorr_speedup",
            MechanismKind::FullAttention => "full_attention",
        }
    }
}

impl std::str::FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autocorr_standard" => Ok(MechanismKind::AutocorrStandard),
            "autocorr_speedup" => Ok(MechanismKind::AutocorrSpeedup),
            "full_attention" => Ok(MechanismKind::FullAttention),
            other => Err(Error::invalid(format!(
                "unknown mechanism `{other}` (expected autocorr_standard, autocorr_speedup or full_attention)"
            ))),
        }
    }
}

impl std::fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// How the rolled copies of `V` are materialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateEncoding {
    /// Explicit circular shift of `V` per delay.
    Roll,
    /// Index gather into `V` concatenated with itself along time.
    Gather,
}

/// Top-k delays and their softmax weights for one correlation profile.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySelection {
    pub delays: Vec<usize>,
    pub weights: Vec<f64>,
    pub k: usize,
}

/// `k = ⌊c · ln L⌋`, capped at `L`.
pub fn topk_count(factor: f64, len: usize) -> Result<usize> {
    if !(factor > 0.0) || len == 0 {
        return Err(Error::invalid(format!("top-k factor {factor} and length {len} must be positive")));
    }
    let k = (factor * (len as f64).ln()).floor();
    if k < 1.0 {
        return Err(Error::invalid(format!(
            "floor({factor} * ln {len}) = {k} selects no delays; use a larger factor or a longer series"
        )));
    }
    Ok((k as usize).min(len))
}

/// Delay count inside the layers: a length-1 series has exactly one lag.
fn layer_topk(factor: f64, len: usize) -> Result<usize> {
    if len == 1 {
        return Ok(1);
    }
    topk_count(factor, len)
}

/// Relative gap below which two correlation values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Indices of the `k` largest values, picked greedily: each pick takes the
/// smallest lag whose value is within `TIE_TOLERANCE · max|R|` of the
/// largest remaining value.
pub(crate) fn top_lags(values: &[f64], k: usize) -> Vec<usize> {
    let scale = values.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = TIE_TOLERANCE * scale;
    let mut taken = vec![false; values.len()];
    let mut out = Vec::with_capacity(k.min(values.len()));
    for _ in 0..k.min(values.len()) {
        let best = values
            .iter()
            .zip(&taken)
            .filter(|(_, t)| !**t)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let pick = (0..values.len())
            .find(|&i| !taken[i] && values[i] >= best - tol)
            .expect("an untaken index attains the maximum");
        taken[pick] = true;
        out.push(pick);
    }
    out
}

pub fn select_topk_delays(profile: &CorrelationProfile, factor: f64) -> Result<DelaySelection> {
    let k = topk_count(factor, profile.series_length())?;
    let delays = top_lags(&profile.values, k);
    let raw: Vec<f64> = delays.iter().map(|&d| profile.values[d]).collect();
    Ok(DelaySelection {
        weights: softmax(&raw)?,
        delays,
        k,
    })
}

/// Lags laid out as `[batch, k, channel]`; a batch or channel extent of 1
/// broadcasts over the tensor being aggregated.
#[derive(Debug, Clone, PartialEq)]
pub struct LagTable {
    batch: usize,
    k: usize,
    channels: usize,
    lags: Vec<usize>,
}

impl LagTable {
    pub fn new(batch: usize, k: usize, channels: usize, lags: Vec<usize>) -> Result<Self> {
        if lags.len() != batch * k * channels || k == 0 {
            return Err(Error::shape("LagTable::new", format!("[{batch}, {k}, {channels}] vs {} lags", lags.len())));
        }
        Ok(LagTable {
            batch,
            k,
            channels,
            lags,
        })
    }

    pub fn global(delays: &[usize]) -> Result<Self> {
        LagTable::new(1, delays.len(), 1, delays.to_vec())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    pub fn is_global(&self) -> bool {
        self.batch == 1 && self.channels == 1
    }

    pub(crate) fn offset(&self, b: usize, i: usize, c: usize) -> usize {
        let b = if self.batch == 1 { 0 } else { b };
        let c = if self.channels == 1 { 0 } else { c };
        (b * self.k + i) * self.channels + c
    }

    pub(crate) fn get(&self, b: usize, i: usize, c: usize) -> usize {
        self.lags[self.offset(b, i, c)]
    }
}

/// `out[b, t, c] = Σ_i w[b, i, c] · v[b, (t + τ_{b,i,c}) mod L, c]`.
pub(crate) fn aggregate(v: &Tensor, weights: &[f64], lags: &LagTable, encoding: AggregateEncoding) -> Result<Tensor> {
    let (b, l, c) = v.dims3("aggregate")?;
    if !(lags.batch == 1 || lags.batch == b) || !(lags.channels == 1 || lags.channels == c) {
        return Err(Error::shape(
            "aggregate",
            format!("lag table [{}, {}, {}] against values {:?}", lags.batch, lags.k, lags.channels, v.shape()),
        ));
    }
    if weights.len() != lags.lags.len() {
        return Err(Error::shape("aggregate", "weights and lags disagree"));
    }
    if let Some(&bad) = lags.lags.iter().find(|&&t| t >= l) {
        return Err(Error::invalid(format!("delay {bad} outside [0, {l})")));
    }
    let mut out = vec![0.0; v.len()];
    match encoding {
        AggregateEncoding::Roll if lags.is_global() => {
            for (i, &tau) in lags.lags.iter().enumerate() {
                let rolled = series::roll(v, tau)?;
                for (o, x) in out.iter_mut().zip(rolled.data()) {
                    *o += weights[i] * x;
                }
            }
        }
        AggregateEncoding::Roll => {
            let src = v.data();
            for i in 0..lags.k {
                for bi in 0..b {
                    for ch in 0..c {
                        let tau = lags.get(bi, i, ch);
                        let w = weights[lags.offset(bi, i, ch)];
                        let column: Vec<f64> = (0..l).map(|t| src[(bi * l + t) * c + ch]).collect();
                        let mut column = column;
                        column.rotate_left(tau);
                        for (t, x) in column.iter().enumerate() {
                            out[(bi * l + t) * c + ch] += w * x;
                        }
                    }
                }
            }
        }
        AggregateEncoding::Gather => {
            let src = v.data();
            let mut taus = vec![0; c];
            let mut ws = vec![0.0; c];
            for i in 0..lags.k {
                for bi in 0..b {
                    let block = &src[bi * l * c..(bi + 1) * l * c];
                    let dst = &mut out[bi * l * c..(bi + 1) * l * c];
                    if lags.channels == 1 {
                        let tau = lags.get(bi, i, 0);
                        let w = weights[lags.offset(bi, i, 0)];
                        let (head, tail) = dst.split_at_mut((l - tau) * c);
                        for (o, x) in head.iter_mut().zip(&block[tau * c..]) {
                            *o += w * x;
                        }
                        for (o, x) in tail.iter_mut().zip(&block[..tau * c]) {
                            *o += w * x;
                        }
                        continue;
                    }
                    for ch in 0..c {
                        taus[ch] = lags.get(bi, i, ch);
                        ws[ch] = weights[lags.offset(bi, i, ch)];
                    }
                    for (t, row) in dst.chunks_exact_mut(c).enumerate() {
                        for (ch, o) in row.iter_mut().enumerate() {
                            let mut s = t + taus[ch];
                            if s >= l {
                                s -= l;
                            }
                            *o += ws[ch] * block[s * c + ch];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(v.shape().to_vec(), out)
}

/// `Σ_i weights[i] · roll(v, delays[i])` for a `[B, L, C]` (or `[1, L, C]`) tensor.
pub fn time_delay_aggregate(v: &Tensor, sel: &DelaySelection) -> Result<Tensor> {
    if sel.delays.len() != sel.weights.len() || sel.delays.is_empty() {
        return Err(Error::shape("time_delay_aggregate", "delays and weights disagree"));
    }
    aggregate(v, &sel.weights, &LagTable::global(&sel.delays)?, AggregateEncoding::Roll)
}

/// Truncate, or zero-fill at the end, along time to `target` rows.
pub fn resize_kv(x: &Tensor, target: usize) -> Result<Tensor> {
    let mut tape = GradientTape::inference();
    let v = tape.constant(x.clone());
    let out = tape.resize_time(v, target)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LagMode {
    Select,
    Record,
    Replay,
}

/// Controls whether lag selection is recomputed, recorded, or replayed.
///
/// Replaying a recorded sequence holds every top-k choice fixed, which is
/// what finite-difference probes of the layers need.
#[derive(Debug, Clone)]
pub struct LagMemory {
    mode: LagMode,
    log: Vec<LagTable>,
    cursor: usize,
}

impl LagMemory {
    pub fn select() -> Self {
        LagMemory {
            mode: LagMode::Select,
            log: Vec::new(),
            cursor: 0,
        }
    }

    pub fn record() -> Self {
        LagMemory {
            mode: LagMode::Record,
            ..Self::select()
        }
    }

    pub fn replay(log: Vec<LagTable>) -> Self {
        LagMemory {
            mode: LagMode::Replay,
            log,
            cursor: 0,
        }
    }

    pub fn recorded(&self) -> &[LagTable] {
        &self.log
    }

    pub fn into_recorded(self) -> Vec<LagTable> {
        self.log
    }

    fn resolve(&mut self, compute: impl FnOnce() -> Result<LagTable>) -> Result<LagTable> {
        match self.mode {
            LagMode::Select => compute(),
            LagMode::Record => {
                let t = compute()?;
                self.log.push(t.clone());
                Ok(t)
            }
            LagMode::Replay => {
                let t = self
                    .log
                    .get(self.cursor)
                    .cloned()
                    .ok_or_else(|| Error::invalid("lag replay exhausted"))?;
                self.cursor += 1;
                Ok(t)
            }
        }
    }
}

/// Auto-Correlation on the tape. `k` and `v` must already have the query length.
pub(crate) fn auto_correlation(
    tape: &mut GradientTape,
    lags: &mut LagMemory,
    q: Var,
    k: Var,
    v: Var,
    factor: f64,
    speedup: Option<Phase>,
) -> Result<Var> {
    let (b, l, c) = tape.value(q).dims3("auto_correlation")?;
    if tape.value(k).shape() != tape.value(q).shape() || tape.value(v).shape() != tape.value(q).shape() {
        return Err(Error::shape(
            "auto_correlation",
            format!(
                "q {:?}, k {:?}, v {:?}",
                tape.value(q).shape(),
                tape.value(k).shape(),
                tape.value(v).shape()
            ),
        ));
    }
    let topk = layer_topk(factor, l)?;
    let corr = tape.correlation(q, k)?;
    let (profile, encoding) = match speedup {
        None => (corr, AggregateEncoding::Gather),
        Some(phase) => {
            let mean = tape.mean_columns(corr)?;
            let enc = match phase {
                Phase::Train => AggregateEncoding::Roll,
                Phase::Infer => AggregateEncoding::Gather,
            };
            (mean, enc)
        }
    };
    let table = lags.resolve(|| {
        let p = tape.value(profile);
        let (pb, pl, pc) = p.dims3("auto_correlation")?;
        let mut out = vec![0; pb * topk * pc];
        for bi in 0..pb {
            for ch in 0..pc {
                for (i, tau) in top_lags(&p.column(bi, ch), topk).into_iter().enumerate() {
                    out[(bi * topk + i) * pc + ch] = tau;
                }
            }
        }
        debug_assert_eq!(pl, l);
        LagTable::new(pb, topk, pc, out)
    })?;
    let expected = if speedup.is_some() { (1, 1) } else { (b, c) };
    if (table.batch, table.channels) != expected || table.k != topk {
        return Err(Error::invalid("replayed lag table does not match this layer"));
    }
    let raw = tape.gather_lags(profile, table.clone())?;
    let weights = tape.softmax(raw, 1)?;
    tape.aggregate(v, weights, table, encoding)
}

fn value_mechanism(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    run: impl FnOnce(&mut GradientTape, &mut LagMemory, Var, Var, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut tape = GradientTape::inference();
    let mut lags = LagMemory::select();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = run(&mut tape, &mut lags, qv, kv, vv)?;
    Ok(tape.value(out).clone())
}

/// Per-channel lag selection and gather-based aggregation over `[B, L, C]`.
pub fn autocorrelation_standard(q: &Tensor, k: &Tensor, v: &Tensor, factor: f64) -> Result<Tensor> {
    value_mechanism(q, k, v, |t, m, q, k, v| auto_correlation(t, m, q, k, v, factor, None))
}

/// One lag set from the profile averaged over batch and channels.
pub fn autocorrelation_speedup(q: &Tensor, k: &Tensor, v: &Tensor, factor: f64, phase: Phase) -> Result<Tensor> {
    value_mechanism(q, k, v, |t, m, q, k, v| auto_correlation(t, m, q, k, v, factor, Some(phase)))
}

/// Softmax dot-product attention per head, no mask.
pub fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    value_mechanism(q, k, v, |t, _, q, k, v| t.attention(q, k, v, heads))
}

/// Q/K/V/output projections around a configurable mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionProjections {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub kind: MechanismKind,
    pub factor: f64,
}

impl AttentionProjections {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        kind: MechanismKind,
        factor: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::config("n_heads", format!("d_model {d_model} is not divisible by {heads} heads")));
        }
        Ok(AttentionProjections {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, true, rng),
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, true, rng),
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, true, rng),
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, true, rng),
            heads,
            kind,
            factor,
        })
    }

    /// Self form when `cross` is `None`; otherwise keys and values come
    /// from `cross`, resized to the query length.
    pub fn forward(&self, f: &mut Forward<'_>, input: Var, cross: Option<Var>) -> Result<Var> {
        let (_, l, _) = f.tape.value(input).dims3("multi_head_layer")?;
        let source = cross.unwrap_or(input);
        let q = self.query.forward(f, input)?;
        let mut k = self.key.forward(f, source)?;
        let mut v = self.value.forward(f, source)?;
        if f.tape.value(k).shape()[1] != l {
            k = f.tape.resize_time(k, l)?;
            v = f.tape.resize_time(v, l)?;
        }
        let mixed = match self.kind {
            MechanismKind::AutocorrStandard => {
                auto_correlation(&mut f.tape, &mut f.lags, q, k, v, self.factor, None)?
            }
            MechanismKind::AutocorrSpeedup => {
                let phase = f.phase;
                auto_correlation(&mut f.tape, &mut f.lags, q, k, v, self.factor, Some(phase))?
            }
            MechanismKind::FullAttention => f.tape.attention(q, k, v, self.heads)?,
        };
        self.output.forward(f, mixed)
    }
}
