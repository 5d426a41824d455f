//! DDPM mathematics: noise schedules, forward noising, the reverse posterior
//! step, and the ε-prediction U-Net checkpoints shared by every model.

use std::io::{Read, Write};
use std::path::Path;

use maskdiff_nn::{ParamInfo, ParamSet, Tensor, UNet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::finetune::TriggerToken;
use crate::image::ImageTensor;

pub use maskdiff_nn::{Conditioning, UNetSpec as DenoiserSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Explicit betas from [`NoiseSchedule::from_betas`]; not rebuildable
    /// from parameters alone.
    Custom,
}

/// How the per-timestep loss weight `w_t` is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `w_t = 1`.
    Uniform,
    /// `w_t = ᾱ_t / (1 - ᾱ_t)`; turns an image-space loss into the usual
    /// ε-space loss.
    Snr,
}

/// The inputs to [`make_schedule`], persisted alongside checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
    pub weight_mode: WeightMode,
}

impl ScheduleParams {
    pub fn linear(steps: usize) -> Self {
        Self { steps, beta_start: 1e-4, beta_end: 0.02, kind: ScheduleKind::Linear, weight_mode: WeightMode::Uniform }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end, self.kind, self.weight_mode)
    }
}

/// Per-timestep diffusion coefficients, indexed `0..steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    loss_weights: Vec<f64>,
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
    weight_mode: WeightMode,
) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidRange("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Custom => {
            return Err(Error::InvalidConfig("custom schedules are built with NoiseSchedule::from_betas".into()))
        }
    };
    Ok(from_parts(ScheduleParams { steps, beta_start, beta_end, kind, weight_mode }, betas))
}

fn from_parts(params: ScheduleParams, betas: Vec<f64>) -> NoiseSchedule {
    let steps = betas.len();
    let weight_mode = params.weight_mode;
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars: Vec<f64> = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let loss_weights = match weight_mode {
        WeightMode::Uniform => vec![1.0; steps],
        WeightMode::Snr => alpha_bars.iter().map(|ab| ab / (1.0 - ab)).collect(),
    };
    NoiseSchedule { params, betas, alphas, alpha_bars, loss_weights }
}

impl NoiseSchedule {
    /// A schedule with explicit per-step betas, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>, weight_mode: WeightMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let params = ScheduleParams {
            steps: betas.len(),
            beta_start: betas[0],
            beta_end: betas[betas.len() - 1],
            kind: ScheduleKind::Custom,
            weight_mode,
        };
        Ok(from_parts(params, betas))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn loss_weights(&self) -> &[f64] {
        &self.loss_weights
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::IndexOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    /// Returns a copy with every `w_t` multiplied by `factor`.
    pub fn with_scaled_weights(&self, factor: f64) -> Self {
        let mut s = self.clone();
        s.loss_weights.iter_mut().for_each(|w| *w *= factor);
        s
    }

    /// `(sqrt(ᾱ_t), sqrt(1 - ᾱ_t))`
    pub fn q_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// `out = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps` on raw buffers.
pub(crate) fn q_sample_into(x0: &[f32], eps: &[f32], t: usize, schedule: &NoiseSchedule, out: &mut [f32]) {
    let (a, b) = schedule.q_coefficients(t);
    for ((o, &x), &e) in out.iter_mut().zip(x0).zip(eps) {
        *o = (a * x as f64 + b * e as f64) as f32;
    }
}

/// Posterior-mean reverse step on raw buffers, plus `sqrt(β_t) z` when noise
/// is supplied and `t > 0`.
pub(crate) fn ddpm_step_into(
    x_t: &[f32],
    eps_hat: &[f32],
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&[f32]>,
    out: &mut [f32],
) {
    let inv_sqrt_alpha = 1.0 / schedule.alphas[t].sqrt();
    let eps_coef = schedule.betas[t] / (1.0 - schedule.alpha_bars[t]).sqrt();
    let sigma = schedule.betas[t].sqrt();
    for i in 0..out.len() {
        let mean = inv_sqrt_alpha * (x_t[i] as f64 - eps_coef * eps_hat[i] as f64);
        out[i] = match noise {
            Some(z) if t > 0 => (mean + sigma * z[i] as f64) as f32,
            _ => mean as f32,
        };
    }
}

/// Forward-noises `x0` to timestep `t`.
pub fn q_sample(x0: &ImageTensor, t: usize, eps: &ImageTensor, schedule: &NoiseSchedule) -> Result<ImageTensor> {
    x0.ensure_same_shape(eps, "q_sample eps")?;
    schedule.check_t(t)?;
    let mut out = ImageTensor::zeros_like(x0);
    q_sample_into(x0.data(), eps.data(), t, schedule, out.data_mut());
    Ok(out)
}

/// One reverse step `x_t -> x_{t-1}` given a noise estimate.
pub fn ddpm_step(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    x_t.ensure_same_shape(eps_hat, "ddpm_step eps_hat")?;
    if let Some(z) = noise {
        x_t.ensure_same_shape(z, "ddpm_step noise")?;
    }
    schedule.check_t(t)?;
    let mut out = ImageTensor::zeros_like(x_t);
    ddpm_step_into(x_t.data(), eps_hat.data(), t, schedule, noise.map(|z| z.data()), out.data_mut());
    Ok(out)
}

/// Recovers the implied clean image `(x_t - sqrt(1-ᾱ_t) ε̂) / sqrt(ᾱ_t)`.
pub fn predict_x0(x_t: &ImageTensor, eps_hat: &ImageTensor, t: usize, schedule: &NoiseSchedule) -> Result<ImageTensor> {
    x_t.ensure_same_shape(eps_hat, "predict_x0 eps_hat")?;
    schedule.check_t(t)?;
    let (a, b) = schedule.q_coefficients(t);
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| ((x as f64 - b * e as f64) / a) as f32)
        .collect();
    ImageTensor::new(x_t.channels(), x_t.height(), x_t.width(), data)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"MDIFCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Trained (or freshly initialized) U-Net weights with everything needed to
/// use them: architecture, init seed, the schedule they were trained under
/// and, for conditioned models, the trigger token.
#[derive(Clone)]
pub struct Checkpoint {
    pub spec: DenoiserSpec,
    pub seed: u64,
    pub schedule: Option<ScheduleParams>,
    pub token: Option<TriggerToken>,
    pub label: String,
    params: ParamSet,
    net: UNet,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("label", &self.label)
            .field("spec", &self.spec)
            .field("seed", &self.seed)
            .field("params", &self.params.num_scalars())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    label: String,
    spec: DenoiserSpec,
    seed: u64,
    schedule: Option<ScheduleParams>,
    params: Vec<ParamInfo>,
    token: Option<TokenHeader>,
}

#[derive(Serialize, Deserialize)]
struct TokenHeader {
    text: String,
    dim: usize,
}

/// Instantiates a denoiser with seeded random weights.
pub fn build_denoiser(spec: &DenoiserSpec, seed: u64) -> Result<Checkpoint> {
    let (net, params) = UNet::build(spec, seed)?;
    Ok(Checkpoint { spec: spec.clone(), seed, schedule: None, token: None, label: String::new(), params, net })
}

impl Checkpoint {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    /// Splits into the network layout and its mutable weights for training.
    pub(crate) fn parts_mut(&mut self) -> (&UNet, &mut ParamSet) {
        (&self.net, &mut self.params)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Runs the network on a batch. `cond` is a single conditioning vector
    /// broadcast over the batch.
    pub fn predict(&self, x: Tensor, timesteps: &[usize], cond: Option<&[f32]>) -> Tensor {
        let n = x.n();
        let cond = cond.map(|c| {
            let mut data = Vec::with_capacity(n * c.len());
            (0..n).for_each(|_| data.extend_from_slice(c));
            Tensor::from_vec([n, c.len(), 1, 1], data)
        });
        self.net.predict(&self.params, x, timesteps, cond)
    }

    /// Conditioning vector to feed the network: the token embedding when the
    /// architecture expects one.
    pub fn conditioning_vector(&self) -> Option<&[f32]> {
        match self.spec.conditioning {
            Conditioning::TriggerToken => self.token.as_ref().map(|t| t.embedding.as_slice()),
            Conditioning::None => None,
        }
    }

    /// Hex SHA-256 over the raw weights (and token embedding).
    pub fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.params.values() {
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        if let Some(t) = &self.token {
            h.update(t.text.as_bytes());
            for x in &t.embedding {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            label: self.label.clone(),
            spec: self.spec.clone(),
            seed: self.seed,
            schedule: self.schedule,
            params: self.params.infos().to_vec(),
            token: self.token.as_ref().map(|t| TokenHeader { text: t.text.clone(), dim: t.embedding.len() }),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + header.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.params.values() {
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        if let Some(t) = &self.token {
            t.embedding.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::CheckpointFormat(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointFormat(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let header: CheckpointHeader = serde_json::from_slice(body.get(..hlen).ok_or_else(|| bad("truncated header"))?)?;
        let mut floats = body[hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        if body[hlen..].len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let mut values = Vec::with_capacity(header.params.len());
        for info in &header.params {
            let v: Vec<f32> = floats.by_ref().take(info.len()).collect();
            if v.len() != info.len() {
                return Err(Error::CheckpointFormat(format!("truncated weights for {}", info.name)));
            }
            values.push(v);
        }
        let token = match header.token {
            Some(th) => {
                let embedding: Vec<f32> = floats.by_ref().take(th.dim).collect();
                if embedding.len() != th.dim {
                    return Err(bad("truncated token embedding"));
                }
                Some(TriggerToken { text: th.text, embedding })
            }
            None => None,
        };
        if floats.next().is_some() {
            return Err(bad("trailing bytes after payload"));
        }
        let params = ParamSet::from_parts(header.params, values).ok_or_else(|| bad("parameter table mismatch"))?;
        let net = UNet::with_params(&header.spec, &params)?;
        Ok(Self {
            spec: header.spec,
            seed: header.seed,
            schedule: header.schedule,
            token,
            label: header.label,
            params,
            net,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::unreadable(path, e))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
