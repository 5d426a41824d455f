//! Named parameter storage and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type ParamId = usize;

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An ordered collection of named, flat `f32` parameter arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    infos: Vec<ParamInfo>,
    values: Vec<Vec<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(infos: Vec<ParamInfo>, values: Vec<Vec<f32>>) -> Option<Self> {
        if infos.len() != values.len() || infos.iter().zip(&values).any(|(i, v)| i.len() != v.len()) {
            return None;
        }
        Some(Self { infos, values })
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> ParamId {
        let info = ParamInfo { name: name.into(), shape };
        assert_eq!(info.len(), value.len(), "parameter {} has wrong length", info.name);
        self.infos.push(info);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn push_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let len = shape.iter().product();
        let value = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
        self.push(name, shape, value)
    }

    pub fn push_const(&mut self, name: &str, shape: Vec<usize>, value: f32) -> ParamId {
        let len = shape.iter().product();
        self.push(name, shape, vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Vec<f32>] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }
}

/// Per-parameter gradient accumulators, aligned with a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Vec<f32>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { grads: params.values.iter().map(|v| vec![0.0; v.len()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.grads[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.grads[id]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f32) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction and a fixed learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.values.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) {
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = learning_rate / bc1;
        for (i, value) in params.values.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.grads[i]);
            for j in 0..value.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                value[j] -= step_size * m[j] / ((v[j] / bc2).sqrt() + eps);
            }
        }
    }

    /// Adam update for a free-standing vector that lives outside a [`ParamSet`]
    /// (e.g. a learned conditioning embedding). Shares the step counter.
    pub fn step_extra(&self, value: &mut [f32], grad: &[f32], state: &mut AdamSlot) {
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for j in 0..value.len() {
            state.m[j] = beta1 * state.m[j] + (1.0 - beta1) * grad[j];
            state.v[j] = beta2 * state.v[j] + (1.0 - beta2) * grad[j] * grad[j];
            value[j] -= learning_rate / bc1 * state.m[j] / ((state.v[j] / bc2).sqrt() + eps);
        }
    }
}

/// Moment buffers for [`Adam::step_extra`].
#[derive(Clone, Debug)]
pub struct AdamSlot {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamSlot {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len] }
    }
}
