//! Named parameter tensors, their gradients, and the AdamW optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Parameter tensors addressed by id or by dotted name
/// (`decoder.layer0.c2s.wq`). `version` increases on every update so
/// tapes recorded against older values can be detected.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    by_name: BTreeMap<String, ParamId>,
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(&mut self, name: &str, shape: (usize, usize), std: f64, rng: &mut impl Rng) -> ParamId {
        let value = Array2::from_shape_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.insert(name, value)
    }

    /// Fan-in scaled init for a `fan_in x fan_out` weight.
    pub fn kaiming(&mut self, name: &str, shape: (usize, usize), rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / shape.0 as f64).sqrt();
        self.normal(name, shape, std, rng)
    }

    /// Glorot-style init for linear maps without a following ReLU.
    pub fn xavier(&mut self, name: &str, shape: (usize, usize), rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / (shape.0 + shape.1) as f64).sqrt();
        self.normal(name, shape, std, rng)
    }

    pub fn zeros(&mut self, name: &str, shape: (usize, usize)) -> ParamId {
        self.insert(name, Mat::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: (usize, usize)) -> ParamId {
        self.insert(name, Mat::ones(shape))
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        self.version += 1;
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, v)| TensorRecord {
                name: name.clone(),
                shape: [v.nrows(), v.ncols()],
                data: v.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrites values from records. Every parameter must be present with
    /// a matching shape; unknown records are rejected.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> crate::Result<()> {
        if records.len() != self.values.len() {
            return Err(crate::Error::invalid(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                self.values.len()
            )));
        }
        for rec in records {
            let id = self
                .id(&rec.name)
                .ok_or_else(|| crate::Error::invalid(format!("unknown tensor {}", rec.name)))?;
            let expected = self.values[id.0].dim();
            if (rec.shape[0], rec.shape[1]) != expected || rec.data.len() != expected.0 * expected.1 {
                return Err(crate::Error::invalid(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    rec.name, rec.shape, expected
                )));
            }
            self.values[id.0] = Array2::from_shape_vec(expected, rec.data.clone())
                .map_err(|e| crate::Error::invalid(e.to_string()))?;
        }
        self.version += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Mat>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            grads: store.values.iter().map(|v| Mat::zeros(v.dim())).collect(),
        }
    }

    pub fn add(&mut self, id: ParamId, g: &Mat) {
        self.grads[id.0] += g;
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.grads[id.0]
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            *g *= factor;
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            config,
            m: store.values.iter().map(|p| Mat::zeros(p.dim())).collect(),
            v: store.values.iter().map(|p| Mat::zeros(p.dim())).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        let c = self.config;
        let mut clip = 1.0;
        if c.clip_norm > 0.0 {
            let n = grads.norm();
            if n > c.clip_norm {
                clip = c.clip_norm / n;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        if lr == 0.0 {
            return;
        }
        for (i, g) in grads.grads.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut store.values[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
            });
        }
        store.version += 1;
    }
}
