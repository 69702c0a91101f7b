//! Gradient suites: every differentiable operation and the end-to-end
//! model, analytic adjoints against central differences.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autocorr::{auto_correlation, AggregateEncoding, LagMemory, LagTable, Phase};
use crate::error::Result;
use crate::gradcheck::{finite_difference_at, GradCheckSummary};
use crate::model::{AutoformerModel, Batch, ModelConfig};
use crate::params::Forward;
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub eps: f64,
    pub tolerance: f64,
    pub required_fraction: f64,
    /// Parameter coordinates sampled for the model check.
    pub samples: usize,
    pub seed: u64,
    /// Perturbs every analytic gradient; a negative control for the harness.
    pub corrupt: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            eps: 1e-4,
            tolerance: 1e-4,
            required_fraction: 0.99,
            samples: 200,
            seed: 0,
            corrupt: false,
        }
    }
}

fn corrupt(g: f64, on: bool) -> f64 {
    if on {
        g * 1.01 + 1e-3
    } else {
        g
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape and data agree")
}

type Build = dyn Fn(&mut GradientTape, &mut LagMemory, &[Var]) -> Result<Var>;

/// Checks `d/dx Σ r ⊙ op(x)` for every input coordinate, with lag choices
/// recorded on the analytic pass and replayed on every probe.
fn op_suite(name: &str, inputs: Vec<Tensor>, build: &Build, opts: &SuiteOptions, rng: &mut ChaCha8Rng) -> Result<GradCheckSummary> {
    let mut tape = GradientTape::new();
    let mut lags = LagMemory::record();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &mut lags, &vars)?;
    let r = random(tape.value(out).shape(), rng);
    let rv = tape.constant(r.clone());
    let weighted = tape.mul(out, rv)?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;
    let log = lags.into_recorded();

    let analytic: Vec<f64> = vars.iter().flat_map(|v| grads.get_or_zeros(*v)).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let eval = |theta: &[f64]| -> Result<f64> {
        let mut tape = GradientTape::inference();
        let mut lags = LagMemory::replay(log.clone());
        let mut at = 0;
        let mut vars = Vec::with_capacity(shapes.len());
        for s in &shapes {
            let n: usize = s.iter().product();
            vars.push(tape.constant(Tensor::new(s.clone(), theta[at..at + n].to_vec())?));
            at += n;
        }
        let out = build(&mut tape, &mut lags, &vars)?;
        Ok(tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    let coords: Vec<usize> = (0..flat.len()).collect();
    let numeric = finite_difference_at(eval, &flat, opts.eps, &coords)?;
    let pairs: Vec<(f64, f64)> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (corrupt(a, opts.corrupt), n))
        .collect();
    Ok(GradCheckSummary::from_pairs(name, &pairs, opts.tolerance, opts.required_fraction))
}

/// One summary per differentiable operation.
pub fn operation_suites(opts: &SuiteOptions) -> Result<Vec<GradCheckSummary>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (b, l, c) = (2, 9, 3);
    let mut out = Vec::new();
    let mut run = |name: &str, shapes: &[&[usize]], build: &Build, rng: &mut ChaCha8Rng| -> Result<()> {
        let inputs = shapes.iter().map(|s| random(s, rng)).collect();
        out.push(op_suite(name, inputs, build, opts, rng)?);
        Ok(())
    };
    run("linear", &[&[b, l, c], &[c, 4], &[4]], &|t, _, v| {
        let y = t.linear(v[0], v[1])?;
        t.add_bias(y, v[2])
    }, &mut rng)?;
    run("softmax", &[&[b, l, c]], &|t, _, v| t.softmax(v[0], 1), &mut rng)?;
    run("elementwise", &[&[b, l, c], &[b, l, c]], &|t, _, v| {
        let p = t.mul(v[0], v[1])?;
        let s = t.sub(p, v[1])?;
        t.scale(s, 0.5)
    }, &mut rng)?;
    run("series_decomp", &[&[b, l, c]], &|t, _, v| {
        let (s, tr) = t.series_decomp(v[0], 5)?;
        let s2 = t.mul(s, s)?;
        t.add(s2, tr)
    }, &mut rng)?;
    run("correlation", &[&[b, l, c], &[b, l, c]], &|t, _, v| t.correlation(v[0], v[1]), &mut rng)?;
    run("mean_columns", &[&[b, l, c]], &|t, _, v| t.mean_columns(v[0]), &mut rng)?;
    let lags = LagTable::new(b, 3, c, (0..b * 3 * c).map(|i| (i * 5 + 1) % l).collect())?;
    let gl = lags.clone();
    run("gather_lags", &[&[b, l, c]], &move |t, _, v| t.gather_lags(v[0], gl.clone()), &mut rng)?;
    for (name, enc, table) in [
        ("aggregate_gather", AggregateEncoding::Gather, lags.clone()),
        ("aggregate_roll", AggregateEncoding::Roll, LagTable::global(&[0, 4, 7])?),
    ] {
        let wshape = [table.batch(), table.k(), table.channels()];
        run(name, &[&[b, l, c], &wshape], &move |t, _, v| t.aggregate(v[0], v[1], table.clone(), enc), &mut rng)?;
    }
    run("attention", &[&[b, l, 4], &[b, 6, 4], &[b, 6, 4]], &|t, _, v| t.attention(v[0], v[1], v[2], 2), &mut rng)?;
    run("resize_slice_concat", &[&[b, l, c], &[b, 4, c]], &|t, _, v| {
        let r = t.resize_time(v[0], 12)?;
        let s = t.slice_time(r, 3, 7)?;
        t.concat_time(s, v[1])
    }, &mut rng)?;
    for (name, phase) in [
        ("auto_correlation_standard", None),
        ("auto_correlation_speedup_train", Some(Phase::Train)),
        ("auto_correlation_speedup_infer", Some(Phase::Infer)),
    ] {
        run(name, &[&[b, l, c], &[b, l, c], &[b, l, c]], &move |t, m, v| {
            auto_correlation(t, m, v[0], v[1], v[2], 1.0, phase)
        }, &mut rng)?;
    }
    Ok(out)
}

/// End-to-end MSE gradient on `cfg` at `opts.samples` sampled parameter
/// coordinates, with dropout off and top-k choices frozen.
pub fn model_suite(cfg: &ModelConfig, opts: &SuiteOptions) -> Result<GradCheckSummary> {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..cfg.clone()
    };
    let model = AutoformerModel::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let b = 2;
    let batch = Batch {
        x_enc: random(&[b, cfg.input_len, cfg.channels], &mut rng),
        marks_enc: random(&[b, cfg.input_len, cfg.time_channels], &mut rng),
        marks_dec: random(&[b, cfg.decoder_len(), cfg.time_channels], &mut rng),
    };
    let target = random(&[b, cfg.pred_len, cfg.channels], &mut rng);

    let mut f = Forward::train(model.params(), 0.0, 0).with_lags(LagMemory::record());
    let pred = model.forward(&mut f, &batch)?;
    let loss = f.tape.mse(pred, &target)?;
    let grads: Vec<f64> = f.param_grads(loss)?.into_iter().flatten().collect();
    let log = std::mem::replace(&mut f.lags, LagMemory::select()).into_recorded();

    let theta = model.params().to_flat();
    let coords: Vec<usize> = if theta.len() <= opts.samples {
        (0..theta.len()).collect()
    } else {
        sample(&mut rng, theta.len(), opts.samples).into_vec()
    };
    let mut probe = model.clone();
    let eval = |p: &[f64]| -> Result<f64> {
        probe.params_mut().set_flat(p)?;
        let mut f = Forward::train(probe.params(), 0.0, 0).with_lags(LagMemory::replay(log.clone()));
        let pred = probe.forward(&mut f, &batch)?;
        let loss = f.tape.mse(pred, &target)?;
        Ok(f.tape.value(loss).data()[0])
    };
    let numeric = finite_difference_at(eval, &theta, opts.eps, &coords)?;
    let pairs: Vec<(f64, f64)> = coords
        .iter()
        .zip(&numeric)
        .map(|(&i, &n)| (corrupt(grads[i], opts.corrupt), n))
        .collect();
    Ok(GradCheckSummary::from_pairs(
        format!("model[{}]", cfg.mechanism),
        &pairs,
        opts.tolerance,
        opts.required_fraction,
    ))
}

/// Operation suites followed by the model check.
pub fn run_all(cfg: &ModelConfig, opts: &SuiteOptions) -> Result<Vec<GradCheckSummary>> {
    let mut all = operation_suites(opts)?;
    all.push(model_suite(cfg, opts)?);
    Ok(all)
}
