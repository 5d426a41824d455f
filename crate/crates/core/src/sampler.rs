//! Mask-guided ancestral sampling: denoise inside the guiding mask while the
//! rest of the canvas tracks a noised copy of the background.

use maskdiff_nn::{Conditioning, Tensor};

use crate::diffusion::{ddpm_step_into, q_sample_into, Checkpoint, NoiseSchedule};
use crate::error::{Error, Result};
use crate::finetune::TriggerToken;
use crate::image::{BinaryMask, ImageMaskPair, ImageTensor, PairSource};
use crate::rng::{normal_vec, seeded};

/// Everything one guided generation needs.
#[derive(Clone, Debug)]
pub struct GuidanceRequest<'a> {
    pub background: ImageTensor,
    pub mask: BinaryMask,
    pub model: &'a Checkpoint,
    pub token: &'a TriggerToken,
    pub seed: u64,
    /// Adds `sqrt(β_t) z` at every step but the last.
    pub stochastic: bool,
}

impl GuidanceRequest<'_> {
    fn validate(&self) -> Result<()> {
        self.background.ensure_mask_aligned(&self.mask, "guidance request")?;
        let spec = &self.model.spec;
        if self.background.channels() != spec.input_channels || spec.input_channels != spec.output_channels {
            return Err(Error::ShapeMismatch(format!(
                "background has {} channels, model maps {} -> {}",
                self.background.channels(),
                spec.input_channels,
                spec.output_channels
            )));
        }
        let m = spec.size_multiple();
        if self.background.height() % m != 0 || self.background.width() % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} canvas not divisible by {m}",
                self.background.height(),
                self.background.width()
            )));
        }
        if spec.conditioning == Conditioning::TriggerToken {
            if self.token.embedding.len() != spec.embedding_dim() {
                return Err(Error::InvalidToken(
                    self.token.text.clone(),
                    format!("embedding width {} but model expects {}", self.token.embedding.len(), spec.embedding_dim()),
                ));
            }
            if let Some(own) = &self.model.token {
                if own.text != self.token.text {
                    return Err(Error::InvalidToken(
                        self.token.text.clone(),
                        format!("model was trained with `{}`", own.text),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// The evolving state of one guided run.
#[derive(Clone, Debug)]
pub struct SamplerState {
    /// The timestep the next reverse step will consume.
    pub t: usize,
    pub x_t: ImageTensor,
    pub x_prev_source: ImageTensor,
}

/// Content for the unmasked region after a step that lands on timestep `t`:
/// the background noised to `t`, or the background itself for `t = -1`.
pub fn preserve_background(
    background: &ImageTensor,
    t: i64,
    schedule: &NoiseSchedule,
    eps: &ImageTensor,
) -> Result<ImageTensor> {
    background.ensure_same_shape(eps, "preserve_background eps")?;
    match t {
        -1 => Ok(background.clone()),
        t if t < -1 => Err(Error::InvalidRange(format!("timestep {t} below -1"))),
        t => crate::diffusion::q_sample(background, t as usize, eps, schedule),
    }
}

/// `mask ⊙ ddpm_step(x_t, ε̂, t) + (1 - mask) ⊙ preserved`.
pub fn blend_step(
    x_t: &ImageTensor,
    eps_hat: &ImageTensor,
    mask: &BinaryMask,
    preserved: &ImageTensor,
    t: usize,
    schedule: &NoiseSchedule,
    noise: Option<&ImageTensor>,
) -> Result<ImageTensor> {
    x_t.ensure_mask_aligned(mask, "blend_step")?;
    x_t.ensure_same_shape(preserved, "blend_step preserved")?;
    let mut out = crate::diffusion::ddpm_step(x_t, eps_hat, t, schedule, noise)?;
    blend_into(out.data_mut(), preserved.data(), mask.data());
    Ok(out)
}

/// Overwrites unmasked positions of `x` with `keep`.
fn blend_into(x: &mut [f32], keep: &[f32], mask: &[u8]) {
    let plane = mask.len();
    for (i, (v, &k)) in x.iter_mut().zip(keep).enumerate() {
        if mask[i % plane] == 0 {
            *v = k;
        }
    }
}

fn composite(mask: &BinaryMask, x0: &ImageTensor, background: &ImageTensor) -> ImageTensor {
    let mut out = x0.clone();
    out.clamp_unit();
    blend_into(out.data_mut(), background.data(), mask.data());
    out
}

/// Runs one guided generation.
pub fn generate(request: &GuidanceRequest<'_>, schedule: &NoiseSchedule) -> Result<ImageMaskPair> {
    Ok(generate_batch(std::slice::from_ref(request), schedule)?.remove(0))
}

/// Runs several requests against the same model in lock-step, batching the
/// network evaluations. Each request keeps its own seeded noise stream.
pub fn generate_batch(requests: &[GuidanceRequest<'_>], schedule: &NoiseSchedule) -> Result<Vec<ImageMaskPair>> {
    let Some(first) = requests.first() else {
        return Ok(Vec::new());
    };
    for r in requests {
        r.validate()?;
        if !std::ptr::eq(r.model, first.model) || r.token.embedding != first.token.embedding {
            return Err(Error::Unsupported("a batch must share one model and token".into()));
        }
        r.background.ensure_same_shape(&first.background, "batched backgrounds")?;
    }
    let model = first.model;
    let cond = match model.spec.conditioning {
        Conditioning::TriggerToken => Some(first.token.embedding.as_slice()),
        Conditioning::None => None,
    };
    let (c, h, w) = first.background.shape();
    let len = c * h * w;
    let n = requests.len();

    let mut rngs: Vec<_> = requests.iter().map(|r| seeded(r.seed)).collect();
    let mut states: Vec<SamplerState> = requests
        .iter()
        .zip(rngs.iter_mut())
        .map(|(r, rng)| SamplerState {
            t: schedule.steps() - 1,
            x_t: ImageTensor::new(c, h, w, normal_vec(rng, len)).expect("shape checked"),
            x_prev_source: r.background.clone(),
        })
        .collect();

    let mut next = vec![0.0f32; len];
    for t in (0..schedule.steps()).rev() {
        let slices: Vec<&[f32]> = states.iter().map(|s| s.x_t.data()).collect();
        let eps_hat = model.predict(Tensor::stack(&slices, c, h, w), &vec![t; n], cond);
        for (i, ((state, rng), req)) in states.iter_mut().zip(rngs.iter_mut()).zip(requests).enumerate() {
            let z = normal_vec(rng, len);
            ddpm_step_into(
                state.x_t.data(),
                eps_hat.sample(i),
                t,
                schedule,
                req.stochastic.then_some(z.as_slice()),
                &mut next,
            );
            let preserved = if t == 0 {
                state.x_prev_source.data().to_vec()
            } else {
                let mut p = vec![0.0f32; len];
                q_sample_into(state.x_prev_source.data(), &z, t - 1, schedule, &mut p);
                p
            };
            blend_into(&mut next, &preserved, req.mask.data());
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLatent { t });
            }
            state.x_t.data_mut().copy_from_slice(&next);
            state.t = t.saturating_sub(1);
        }
    }

    Ok(states
        .into_iter()
        .zip(requests)
        .map(|(state, req)| ImageMaskPair {
            id: format!("gen-{:016x}", req.seed),
            image: composite(&req.mask, &state.x_t, &req.background),
            mask: req.mask.clone(),
            source: PairSource::Synthetic,
        })
        .collect())
}

/// Paints healthy tissue into `mask` using a model trained on inverted masks.
pub fn repair_to_healthy(
    lesion_image: &ImageTensor,
    mask: &BinaryMask,
    background_model: &Checkpoint,
    token: &TriggerToken,
    seed: u64,
    schedule: &NoiseSchedule,
) -> Result<ImageTensor> {
    let request = GuidanceRequest {
        background: lesion_image.clone(),
        mask: mask.clone(),
        model: background_model,
        token,
        seed,
        stochastic: true,
    };
    Ok(generate(&request, schedule)?.image)
}
