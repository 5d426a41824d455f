//! Few-shot fine-tuning of a token-conditioned denoiser with the masked
//! image-space reconstruction loss, including the inverted-mask variant that
//! teaches a model to paint healthy tissue.

use std::io::Write;
use std::path::Path;

use maskdiff_nn::{Adam, AdamConfig, AdamSlot, Conditioning, Graph, ParamGrads, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample_into, Checkpoint, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageMaskPair, ImageTensor};
use crate::rng::{normal_vec, seeded};

/// Words a trigger token may not collide with.
pub const RESERVED_WORDS: &[&str] = &[
    "a", "an", "the", "of", "and", "or", "in", "on", "with", "image", "photo", "picture", "scan", "lesion",
    "skin", "tissue", "background", "healthy", "normal", "mask", "region", "tumor", "nodule",
];

/// A learned conditioning vector bound to a prompt word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerToken {
    pub text: String,
    pub embedding: Vec<f32>,
}

impl TriggerToken {
    /// A fresh token with a zero embedding of width `dim`.
    pub fn new(text: &str, dim: usize) -> Result<Self> {
        Self::validate_text(text)?;
        Ok(Self { text: text.to_string(), embedding: vec![0.0; dim] })
    }

    pub fn validate_text(text: &str) -> Result<()> {
        let err = |why: &str| Err(Error::InvalidToken(text.to_string(), why.to_string()));
        if text.is_empty() {
            return err("empty");
        }
        if text.chars().any(char::is_whitespace) {
            return err("must be a single whitespace-free word");
        }
        if RESERVED_WORDS.contains(&text.to_lowercase().as_str()) {
            return err("collides with a reserved word");
        }
        Ok(())
    }
}

/// Maps a prompt to a conditioning vector. The trigger token is the desk-scale
/// implementation; a pretrained text encoder would be another.
pub trait PromptEncoder {
    fn encode(&self, prompt: &str) -> Result<Vec<f32>>;
}

impl PromptEncoder for TriggerToken {
    fn encode(&self, prompt: &str) -> Result<Vec<f32>> {
        if prompt.split_whitespace().any(|w| w == self.text) {
            Ok(self.embedding.clone())
        } else {
            Err(Error::InvalidToken(self.text.clone(), format!("absent from prompt `{prompt}`")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Loss inside the lesion mask.
    Lesion,
    /// Loss outside it: learns healthy tissue.
    Inverted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub mask_mode: MaskMode,
    pub seed: u64,
    pub schedule: ScheduleParams,
    pub image_size: usize,
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("iterations and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace(pub Vec<f64>);

impl LossTrace {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Mean of the last `window` steps over the mean of the first `window`.
    pub fn tail_to_head_ratio(&self, window: usize) -> f64 {
        let w = window.min(self.0.len()).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&self.0[self.0.len() - w..]) / mean(&self.0[..w])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.0.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// A trained checkpoint with its loss trace.
#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
}

pub fn invert_mask(mask: &BinaryMask) -> BinaryMask {
    let data = mask.data().iter().map(|&v| 1 - v).collect();
    BinaryMask::new(mask.height(), mask.width(), data).expect("inversion keeps shape and binarity")
}

/// `w_t` times the mean squared error over masked pixels (all channels).
/// An empty mask gives 0.
pub fn masked_loss(
    x0: &ImageTensor,
    mask: &BinaryMask,
    x0_hat: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    x0.ensure_same_shape(x0_hat, "masked_loss prediction")?;
    x0.ensure_mask_aligned(mask, "masked_loss")?;
    schedule.check_t(t)?;
    if mask.is_empty() {
        log::warn!("masked_loss called with an empty mask; returning 0");
        return Ok(0.0);
    }
    let plane = mask.data().len();
    let mut sum = 0.0f64;
    for c in 0..x0.channels() {
        for (i, &m) in mask.data().iter().enumerate() {
            if m == 1 {
                let d = x0_hat.data()[c * plane + i] as f64 - x0.data()[c * plane + i] as f64;
                sum += d * d;
            }
        }
    }
    Ok(schedule.loss_weights()[t] * sum / (mask.count() * x0.channels()) as f64)
}

/// Which objective a [`train_denoiser`] run descends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Objective {
    /// Masked image-space loss through the implied `x̂0`.
    MaskedX0,
    /// Plain `mean (ε̂ - ε)²` over the whole image.
    Epsilon,
}

/// One training example: a clean image and, for the masked objective, the
/// region where the loss applies.
pub(crate) struct Example<'a> {
    pub image: &'a [f32],
    pub mask: Option<&'a [u8]>,
}

pub(crate) struct TrainSetup<'a> {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub schedule: &'a NoiseSchedule,
    pub shape: (usize, usize, usize),
    pub objective: Objective,
    /// Random horizontal/vertical flips of each example.
    pub flips: bool,
}

/// Shared Adam loop for every denoiser in the crate. Trains `ck` in place
/// (and `token` jointly when the network is token-conditioned).
pub(crate) fn train_denoiser(
    ck: &mut Checkpoint,
    mut token: Option<&mut TriggerToken>,
    examples: &[Example<'_>],
    setup: &TrainSetup<'_>,
) -> Result<LossTrace> {
    let (c, h, w) = setup.shape;
    let plane = h * w;
    let len = c * plane;
    let schedule = setup.schedule;
    let conditioned = ck.spec.conditioning == Conditioning::TriggerToken;
    let emb_dim = ck.spec.embedding_dim();
    if conditioned {
        match token.as_deref() {
            Some(t) if t.embedding.len() == emb_dim => {}
            Some(t) => {
                return Err(Error::InvalidToken(
                    t.text.clone(),
                    format!("embedding width {} but the network expects {emb_dim}", t.embedding.len()),
                ))
            }
            None => return Err(Error::InvalidConfig("token-conditioned network needs a trigger token".into())),
        }
    }

    let mut rng = seeded(setup.seed);
    let mut adam = Adam::new(ck.params(), AdamConfig::with_lr(setup.learning_rate));
    let mut slot = AdamSlot::new(emb_dim);
    let mut grads = ParamGrads::zeros_like(ck.params());
    let mut trace = Vec::with_capacity(setup.iterations);
    let b = setup.batch_size;

    let mut x0 = vec![0.0f32; b * len];
    let mut masks = vec![0u8; b * plane];
    let mut xt = vec![0.0f32; b * len];
    let mut eps = vec![0.0f32; b * len];
    let mut ts = vec![0usize; b];

    for step in 0..setup.iterations {
        for s in 0..b {
            let ex = &examples[rng.random_range(0..examples.len())];
            let (fh, fv) = if setup.flips { (rng.random::<bool>(), rng.random::<bool>()) } else { (false, false) };
            let src = |y: usize, x: usize| {
                let sy = if fv { h - 1 - y } else { y };
                let sx = if fh { w - 1 - x } else { x };
                sy * w + sx
            };
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        x0[s * len + ch * plane + y * w + x] = ex.image[ch * plane + src(y, x)];
                    }
                }
            }
            if let Some(m) = ex.mask {
                for y in 0..h {
                    for x in 0..w {
                        masks[s * plane + y * w + x] = m[src(y, x)];
                    }
                }
            }
            ts[s] = rng.random_range(0..schedule.steps());
            eps[s * len..(s + 1) * len].copy_from_slice(&normal_vec(&mut rng, len));
            q_sample_into(
                &x0[s * len..(s + 1) * len],
                &eps[s * len..(s + 1) * len],
                ts[s],
                schedule,
                &mut xt[s * len..(s + 1) * len],
            );
        }

        grads.zero();
        let (net, params) = ck.parts_mut();
        let (loss, cond_grad) = {
            let mut g = Graph::new(params);
            let xi = g.input(Tensor::from_vec([b, c, h, w], xt.clone()));
            let ci = match (&token, conditioned) {
                (Some(tok), true) => {
                    let mut data = Vec::with_capacity(b * emb_dim);
                    (0..b).for_each(|_| data.extend_from_slice(&tok.embedding));
                    Some(g.input(Tensor::from_vec([b, emb_dim, 1, 1], data)))
                }
                _ => None,
            };
            let out = net.forward(&mut g, xi, &ts, ci);
            let eps_hat = g.value(out).data();
            let mut grad_out = vec![0.0f32; b * len];
            let mut loss = 0.0f64;
            for s in 0..b {
                let r = s * len..(s + 1) * len;
                let (l, gs) = match setup.objective {
                    Objective::Epsilon => eps_loss(&eps_hat[r.clone()], &eps[r.clone()]),
                    Objective::MaskedX0 => masked_x0_loss(
                        &xt[r.clone()],
                        &eps_hat[r.clone()],
                        &x0[r.clone()],
                        &masks[s * plane..(s + 1) * plane],
                        c,
                        ts[s],
                        schedule,
                    ),
                };
                loss += l / b as f64;
                for (go, gv) in grad_out[r].iter_mut().zip(gs) {
                    *go = (gv / b as f64) as f32;
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, detail: format!("loss {loss} at timesteps {ts:?}") });
            }
            let node_grads = g.backward(out, Tensor::from_vec([b, c, h, w], grad_out), &mut grads);
            let cond_grad = ci.and_then(|id| node_grads.get(id)).map(|t| {
                let mut acc = vec![0.0f32; emb_dim];
                for s in 0..b {
                    acc.iter_mut().zip(t.sample(s)).for_each(|(a, v)| *a += v);
                }
                acc
            });
            (loss, cond_grad)
        };
        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: "non-finite gradient".into() });
        }
        adam.step(params, &grads);
        if let (Some(tok), Some(gc)) = (token.as_deref_mut(), cond_grad) {
            adam.step_extra(&mut tok.embedding, &gc, &mut slot);
        }
        trace.push(loss);
    }
    Ok(LossTrace(trace))
}

fn eps_loss(eps_hat: &[f32], eps: &[f32]) -> (f64, Vec<f64>) {
    let n = eps.len() as f64;
    let mut loss = 0.0;
    let grad = eps_hat
        .iter()
        .zip(eps)
        .map(|(&p, &e)| {
            let d = p as f64 - e as f64;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, grad)
}

/// Masked loss on `x̂0 = (x_t - b ε̂) / a` and its gradient with respect to ε̂.
fn masked_x0_loss(
    xt: &[f32],
    eps_hat: &[f32],
    x0: &[f32],
    mask: &[u8],
    channels: usize,
    t: usize,
    schedule: &NoiseSchedule,
) -> (f64, Vec<f64>) {
    let plane = mask.len();
    let count = mask.iter().filter(|&&m| m == 1).count() * channels;
    let mut grad = vec![0.0f64; xt.len()];
    if count == 0 {
        log::warn!("training example with an empty mask contributes no loss");
        return (0.0, grad);
    }
    let (a, bcoef) = schedule.q_coefficients(t);
    let wt = schedule.loss_weights()[t];
    let mut sum = 0.0;
    for i in 0..xt.len() {
        if mask[i % plane] == 1 {
            let x0_hat = (xt[i] as f64 - bcoef * eps_hat[i] as f64) / a;
            let d = x0_hat - x0[i] as f64;
            sum += d * d;
            grad[i] = wt * 2.0 * d * (-bcoef / a) / count as f64;
        }
    }
    (wt * sum / count as f64, grad)
}

/// Fine-tunes every parameter of `base` (and the token embedding) on the
/// given pairs with the masked loss.
pub fn finetune(
    dataset: &[ImageMaskPair],
    base: &Checkpoint,
    token: &TriggerToken,
    config: &FinetuneConfig,
) -> Result<Trained> {
    config.validate()?;
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    TriggerToken::validate_text(&token.text)?;
    let shape = first.image.shape();
    for p in dataset {
        if p.image.height() != config.image_size || p.image.width() != config.image_size || p.image.shape() != shape {
            return Err(Error::SizeMismatch(format!(
                "pair {} is {:?}, expected {} channels at {}x{}",
                p.id,
                p.image.shape(),
                shape.0,
                config.image_size,
                config.image_size
            )));
        }
    }
    if base.spec.input_channels != shape.0 || base.spec.output_channels != shape.0 {
        return Err(Error::SizeMismatch(format!(
            "network maps {} -> {} channels but images have {}",
            base.spec.input_channels, base.spec.output_channels, shape.0
        )));
    }
    if config.image_size % base.spec.size_multiple() != 0 {
        return Err(Error::SizeMismatch(format!(
            "image size {} not divisible by {}",
            config.image_size,
            base.spec.size_multiple()
        )));
    }
    let schedule = config.schedule.build()?;
    let masks: Vec<BinaryMask> = dataset
        .iter()
        .map(|p| match config.mask_mode {
            MaskMode::Lesion => p.mask.clone(),
            MaskMode::Inverted => invert_mask(&p.mask),
        })
        .collect();
    let examples: Vec<Example<'_>> = dataset
        .iter()
        .zip(&masks)
        .map(|(p, m)| Example { image: p.image.data(), mask: Some(m.data()) })
        .collect();

    let mut ck = base.clone();
    let mut tok = token.clone();
    let setup = TrainSetup {
        iterations: config.iterations,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        seed: config.seed,
        schedule: &schedule,
        shape,
        objective: Objective::MaskedX0,
        flips: false,
    };
    let trace = train_denoiser(&mut ck, Some(&mut tok), &examples, &setup)?;
    ck.schedule = Some(config.schedule);
    ck.token = Some(tok);
    Ok(Trained { checkpoint: ck, trace })
}
