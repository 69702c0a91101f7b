//! Named parameter storage and the per-pass forward context.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autocorr::{LagMemory, Phase};
use crate::error::{Error, Result};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) initialisation.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape and data agree"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.values[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Zeroes every parameter whose name starts with `prefix`; returns the count.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) {
                value.data_mut().iter_mut().for_each(|v| *v = 0.0);
                n += 1;
            }
        }
        n
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_elements() {
            return Err(Error::shape("ParamStore::set_flat", "flat length differs from parameter count"));
        }
        let mut at = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Replace every value, checking shapes by name.
    pub fn load_values(&mut self, named: &HashMap<String, Tensor>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Data(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = named
                .get(name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            if src.shape() != value.shape() {
                return Err(Error::Data(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    value.shape(),
                    src.shape()
                )));
            }
            *value = src.clone();
        }
        Ok(())
    }
}

/// Affine map `x·W (+ b)` over the last axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[d_in, d_out], d_in, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[d_out], d_in, rng));
        Linear { weight, bias }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let y = f.tape.linear(x, w)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                f.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// State for one forward (and optional backward) pass.
pub struct Forward<'a> {
    pub tape: GradientTape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub phase: Phase,
    pub lags: LagMemory,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'a> Forward<'a> {
    /// Differentiable training-phase pass.
    pub fn train(store: &'a ParamStore, dropout: f64, seed: u64) -> Self {
        Forward {
            tape: GradientTape::new(),
            store,
            bound: vec![None; store.len()],
            phase: Phase::Train,
            lags: LagMemory::select(),
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Value-only inference-phase pass (no dropout).
    pub fn infer(store: &'a ParamStore) -> Self {
        Forward {
            tape: GradientTape::inference(),
            store,
            bound: vec![None; store.len()],
            phase: Phase::Infer,
            lags: LagMemory::select(),
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn with_lags(mut self, lags: LagMemory) -> Self {
        self.lags = lags;
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if self.dropout <= 0.0 || self.phase == Phase::Infer {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.tape.mask_mul(x, mask)
    }

    /// Gradient of `loss` for every parameter, zeros for unused ones.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Vec<f64>>> {
        let grads = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .zip(self.store.values())
            .map(|(v, t)| match v {
                Some(v) => grads.get_or_zeros(*v),
                None => vec![0.0; t.len()],
            })
            .collect())
    }
}
