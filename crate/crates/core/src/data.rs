//! CSV ingestion, chronological splits, standardisation, sliding windows
//! and synthetic series.

use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

const DATETIME_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"];

#[derive(Debug, Clone, PartialEq)]
pub enum Timestamps {
    DateTime(Vec<NaiveDateTime>),
    /// Integer index with the `(first, last)` range of the source file, kept
    /// across splits so that marks stay on one scale.
    Index { values: Vec<i64>, range: (i64, i64) },
}

impl Timestamps {
    pub fn len(&self) -> usize {
        match self {
            Timestamps::DateTime(v) => v.len(),
            Timestamps::Index { values, .. } => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of the time-mark features: five calendar fields or one index.
    pub fn mark_width(&self) -> usize {
        match self {
            Timestamps::DateTime(_) => 5,
            Timestamps::Index { .. } => 1,
        }
    }

    fn slice(&self, start: usize, end: usize) -> Timestamps {
        match self {
            Timestamps::DateTime(v) => Timestamps::DateTime(v[start..end].to_vec()),
            Timestamps::Index { values, range } => Timestamps::Index {
                values: values[start..end].to_vec(),
                range: *range,
            },
        }
    }

    fn label(&self, i: usize) -> String {
        match self {
            Timestamps::DateTime(v) => v[i].format("%Y-%m-%d %H:%M:%S").to_string(),
            Timestamps::Index { values, .. } => values[i].to_string(),
        }
    }
}

/// `L` rows of `d` channels in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    pub timestamps: Timestamps,
    pub channels: Vec<String>,
    pub values: Vec<f64>,
}

impl TimeSeriesFrame {
    pub fn new(timestamps: Timestamps, channels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = timestamps.len();
        if values.len() != n * channels.len() {
            return Err(Error::Data(format!(
                "{} values for {n} rows of {} channels",
                values.len(),
                channels.len()
            )));
        }
        let increasing = match &timestamps {
            Timestamps::DateTime(v) => v.windows(2).position(|w| w[1] <= w[0]),
            Timestamps::Index { values, .. } => values.windows(2).position(|w| w[1] <= w[0]),
        };
        if let Some(i) = increasing {
            return Err(Error::Data(format!("timestamps not strictly increasing at row {}", i + 2)));
        }
        Ok(TimeSeriesFrame {
            timestamps,
            channels,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.n_channels() + channel]
    }

    pub fn column(&self, channel: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.value(r, channel)).collect()
    }

    /// Rows `start..end` as a new frame.
    pub fn slice(&self, start: usize, end: usize) -> TimeSeriesFrame {
        let d = self.n_channels();
        TimeSeriesFrame {
            timestamps: self.timestamps.slice(start, end),
            channels: self.channels.clone(),
            values: self.values[start * d..end * d].to_vec(),
        }
    }

    /// Values as a `[1, L, d]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.len(), self.n_channels()], self.values.clone()).expect("frame is rectangular")
    }

    /// Per-row time features, `L × mark_width`, each in `[−0.5, 0.5]`.
    pub fn time_marks(&self) -> Vec<f64> {
        match &self.timestamps {
            Timestamps::DateTime(v) => v
                .iter()
                .flat_map(|t| {
                    [
                        t.month0() as f64 / 11.0 - 0.5,
                        t.day0() as f64 / 30.0 - 0.5,
                        t.weekday().num_days_from_monday() as f64 / 6.0 - 0.5,
                        t.hour() as f64 / 23.0 - 0.5,
                        t.minute() as f64 / 59.0 - 0.5,
                    ]
                })
                .collect(),
            Timestamps::Index { values, range } => {
                let span = (range.1 - range.0).max(1) as f64;
                values.iter().map(|&t| (t - range.0) as f64 / span - 0.5).collect()
            }
        }
    }
}

fn parse_timestamp(cell: &str) -> Option<ParsedTime> {
    if let Ok(i) = cell.parse::<i64>() {
        return Some(ParsedTime::Index(i));
    }
    for fmt in DATETIME_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(cell, fmt) {
            return Some(ParsedTime::DateTime(t));
        }
    }
    NaiveDate::parse_from_str(cell, "%Y-%m-%d")
        .ok()
        .map(|d| ParsedTime::DateTime(d.and_hms_opt(0, 0, 0).expect("midnight exists")))
}

enum ParsedTime {
    DateTime(NaiveDateTime),
    Index(i64),
}

/// Reads a CSV whose first column is `date` and whose other columns are numeric.
pub fn load_csv(path: &Path) -> Result<TimeSeriesFrame> {
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<TimeSeriesFrame> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("date") {
        return Err(Error::Data(format!(
            "first column must be named `date`, found `{}`",
            headers.get(0).unwrap_or("")
        )));
    }
    let channels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    if channels.is_empty() {
        return Err(Error::Data("no value columns".into()));
    }
    let mut dates = Vec::new();
    let mut index = Vec::new();
    let mut values = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let line = r + 2;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "line {line}: {} fields, expected {}",
                record.len(),
                headers.len()
            )));
        }
        let cell = &record[0];
        match parse_timestamp(cell) {
            Some(ParsedTime::DateTime(t)) if index.is_empty() => dates.push(t),
            Some(ParsedTime::Index(i)) if dates.is_empty() => index.push(i),
            Some(_) => {
                return Err(Error::Data(format!("line {line}, column 1 (date): mixed timestamp kinds")));
            }
            None => {
                return Err(Error::Data(format!("line {line}, column 1 (date): cannot parse `{cell}`")));
            }
        }
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::Data(format!(
                    "line {line}, column {} ({}): invalid value `{cell}`",
                    c + 1,
                    &headers[c]
                ))
            })?;
            values.push(v);
        }
    }
    let timestamps = if dates.is_empty() {
        let range = (index.first().copied().unwrap_or(0), index.last().copied().unwrap_or(0));
        Timestamps::Index { values: index, range }
    } else {
        Timestamps::DateTime(dates)
    };
    TimeSeriesFrame::new(timestamps, channels, values)
}

pub fn write_csv<W: std::io::Write>(frame: &TimeSeriesFrame, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_string()];
    header.extend(frame.channels.iter().cloned());
    w.write_record(&header)?;
    for r in 0..frame.len() {
        let mut row = vec![frame.timestamps.label(r)];
        row.extend((0..frame.n_channels()).map(|c| frame.value(r, c).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(frame: &TimeSeriesFrame, path: &Path) -> Result<()> {
    write_csv(frame, std::fs::File::create(path)?)
}

/// Contiguous train/validation/test frames of `⌊r₁L⌋`, `⌊r₂L⌋` and the
/// remaining rows. Each part must hold at least `min_len` rows.
pub fn chronological_split(frame: &TimeSeriesFrame, ratios: [f64; 3], min_len: usize) -> Result<[TimeSeriesFrame; 3]> {
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::invalid(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let n = frame.len();
    let n1 = (ratios[0] * n as f64 / total).floor() as usize;
    let n2 = (ratios[1] * n as f64 / total).floor() as usize;
    let n1 = n1.min(n);
    let n2 = n2.min(n - n1);
    let lens = [n1, n2, n - n1 - n2];
    for (name, len) in ["train", "val", "test"].iter().zip(lens) {
        if len < min_len {
            return Err(Error::Data(format!(
                "{name} split has {len} rows, fewer than the {min_len} one window needs"
            )));
        }
    }
    Ok([
        frame.slice(0, n1),
        frame.slice(n1, n1 + n2),
        frame.slice(n1 + n2, n),
    ])
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Population statistics of `frame`; zero variance is rejected.
    pub fn fit(frame: &TimeSeriesFrame) -> Result<Self> {
        if frame.is_empty() {
            return Err(Error::Data("cannot fit statistics on an empty frame".into()));
        }
        let n = frame.len() as f64;
        let mut mean = Vec::with_capacity(frame.n_channels());
        let mut std = Vec::with_capacity(frame.n_channels());
        for c in 0..frame.n_channels() {
            let col = frame.column(c);
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            if !(var > 0.0) {
                return Err(Error::Data(format!("channel `{}` has zero variance in the training split", frame.channels[c])));
            }
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Scaler {
            channels: frame.channels.clone(),
            mean,
            std,
        })
    }

    pub fn normalize(&self, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
        self.check(frame)?;
        let d = frame.n_channels();
        let values = frame
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Ok(TimeSeriesFrame {
            values,
            ..frame.clone()
        })
    }

    /// Inverse map for row-major values whose last axis has `d` channels.
    pub fn denormalize(&self, values: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect()
    }

    fn check(&self, frame: &TimeSeriesFrame) -> Result<()> {
        if frame.n_channels() != self.mean.len() {
            return Err(Error::Data(format!(
                "frame has {} channels, statistics cover {}",
                frame.n_channels(),
                self.mean.len()
            )));
        }
        Ok(())
    }
}

/// Z-scores all three splits with the training statistics.
pub fn standardize(train: &TimeSeriesFrame, val: &TimeSeriesFrame, test: &TimeSeriesFrame) -> Result<([TimeSeriesFrame; 3], Scaler)> {
    let scaler = Scaler::fit(train)?;
    Ok((
        [scaler.normalize(train)?, scaler.normalize(val)?, scaler.normalize(test)?],
        scaler,
    ))
}

/// One input-I-predict-O example.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `[I, d]`
    pub x_enc: Tensor,
    /// `[I, d_time]`
    pub marks_enc: Tensor,
    /// `[⌊I/2⌋ + O, d_time]`
    pub marks_dec: Tensor,
    /// `[O, d]`
    pub target: Tensor,
}

impl WindowSample {
    /// Last encoder value repeated over the horizon.
    pub fn persistence(&self) -> Tensor {
        let (i, d) = (self.x_enc.shape()[0], self.x_enc.shape()[1]);
        let o = self.target.shape()[0];
        let last = &self.x_enc.data()[(i - 1) * d..];
        Tensor::new(vec![o, d], last.iter().copied().cycle().take(o * d).collect()).expect("shape matches")
    }
}

pub fn make_windows(frame: &TimeSeriesFrame, input_len: usize, pred_len: usize, stride: usize) -> Result<Vec<WindowSample>> {
    if input_len == 0 || pred_len == 0 || stride == 0 {
        return Err(Error::invalid("window lengths and stride must be positive"));
    }
    let n = frame.len();
    if n < input_len + pred_len {
        return Err(Error::Data(format!(
            "{n} rows cannot hold a window of {} + {} steps",
            input_len, pred_len
        )));
    }
    let d = frame.n_channels();
    let dt = frame.timestamps.mark_width();
    let marks = frame.time_marks();
    let label = input_len / 2;
    let rows = |data: &[f64], width: usize, start: usize, len: usize| {
        Tensor::new(vec![len, width], data[start * width..(start + len) * width].to_vec()).expect("window inside frame")
    };
    Ok((0..=n - input_len - pred_len)
        .step_by(stride)
        .map(|s| WindowSample {
            x_enc: rows(&frame.values, d, s, input_len),
            marks_enc: rows(&marks, dt, s, input_len),
            marks_dec: rows(&marks, dt, s + input_len - label, label + pred_len),
            target: rows(&frame.values, d, s + input_len, pred_len),
        })
        .collect())
}

fn stack(parts: &[&Tensor]) -> Tensor {
    let inner = parts[0].shape().to_vec();
    let mut shape = vec![parts.len()];
    shape.extend(inner);
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("windows share a shape")
}

/// Stacks windows into model inputs and a `[B, O, d]` target.
pub fn collate(windows: &[&WindowSample]) -> Result<(Batch, Tensor)> {
    if windows.is_empty() {
        return Err(Error::invalid("cannot collate an empty batch"));
    }
    let pick = |f: fn(&WindowSample) -> &Tensor| -> Vec<&Tensor> { windows.iter().map(|w| f(w)).collect() };
    for w in windows {
        if w.x_enc.shape() != windows[0].x_enc.shape() || w.target.shape() != windows[0].target.shape() {
            return Err(Error::shape("collate", "windows differ in shape"));
        }
    }
    Ok((
        Batch {
            x_enc: stack(&pick(|w| &w.x_enc)),
            marks_enc: stack(&pick(|w| &w.marks_enc)),
            marks_dec: stack(&pick(|w| &w.marks_dec)),
        },
        stack(&pick(|w| &w.target)),
    ))
}

/// Parameters of a synthetic multi-channel series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub length: usize,
    #[serde(default = "one")]
    pub channels: usize,
    #[serde(default)]
    pub periods: Vec<f64>,
    #[serde(default)]
    pub trend_slope: f64,
    #[serde(default)]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

/// `Σ_p sin(2πt/p) + slope·t + N(0, sd²)` per channel, integer timestamps.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<TimeSeriesFrame> {
    if spec.length == 0 || spec.channels == 0 {
        return Err(Error::invalid("synthetic length and channel count must be at least 1"));
    }
    if let Some(p) = spec.periods.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
        return Err(Error::invalid(format!("period {p} must be positive")));
    }
    if !(spec.noise_sd >= 0.0) || !spec.noise_sd.is_finite() || !spec.trend_slope.is_finite() {
        return Err(Error::invalid("noise_sd must be non-negative and trend_slope finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd).expect("validated standard deviation");
    let mut values = Vec::with_capacity(spec.length * spec.channels);
    for t in 0..spec.length {
        let tf = t as f64;
        let base: f64 = spec
            .periods
            .iter()
            .map(|p| (2.0 * std::f64::consts::PI * tf / p).sin())
            .sum::<f64>()
            + spec.trend_slope * tf;
        for _ in 0..spec.channels {
            let eps = if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            values.push(base + eps);
        }
    }
    let index: Vec<i64> = (0..spec.length as i64).collect();
    let channels = if spec.channels == 1 {
        vec!["value".to_string()]
    } else {
        (0..spec.channels).map(|c| format!("ch{c}")).collect()
    };
    TimeSeriesFrame::new(
        Timestamps::Index {
            range: (0, spec.length as i64 - 1),
            values: index,
        },
        channels,
        values,
    )
}
