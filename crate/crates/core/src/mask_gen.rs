//! An unconditional DDPM over binary mask images, used to produce diverse
//! guiding masks, plus classic flip/erode augmentation.

use serde::{Deserialize, Serialize};

use crate::curation::erode_mask;
use crate::diffusion::{build_denoiser, Checkpoint, Conditioning, DenoiserSpec, NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::finetune::{train_denoiser, Example, Objective, TrainSetup, Trained, TriggerToken};
use crate::image::{BinaryMask, ImageTensor};
use crate::rng::item_seed;
use crate::sampler::{generate_batch, GuidanceRequest};

/// Channel widths of the mask generator; not configurable.
pub const MASK_MODEL_WIDTHS: [usize; 4] = [64, 128, 256, 512];

const MAX_SAMPLE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskModelConfig {
    pub spec: DenoiserSpec,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub image_size: usize,
    pub schedule: ScheduleParams,
}

impl MaskModelConfig {
    /// The fixed single-channel architecture. `patch` and the timestep
    /// embedding width are the only free knobs.
    pub fn fixed_spec(patch: usize, timestep_embedding_dim: usize) -> DenoiserSpec {
        DenoiserSpec {
            levels: 4,
            channel_widths: MASK_MODEL_WIDTHS.to_vec(),
            conditioning: Conditioning::None,
            timestep_embedding_dim,
            input_channels: 1,
            output_channels: 1,
            patch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.spec;
        if s.levels != 4
            || s.channel_widths != MASK_MODEL_WIDTHS
            || s.input_channels != 1
            || s.output_channels != 1
            || s.conditioning != Conditioning::None
        {
            return Err(Error::InvalidConfig(format!(
                "mask model must be the fixed 4-level {MASK_MODEL_WIDTHS:?} single-channel network, got {s:?}"
            )));
        }
        if self.iterations == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("mask model needs iterations, batch_size and learning_rate > 0".into()));
        }
        if self.image_size % s.size_multiple() != 0 {
            return Err(Error::InvalidConfig(format!(
                "mask size {} not divisible by {}",
                self.image_size,
                s.size_multiple()
            )));
        }
        Ok(())
    }
}

/// Acceptance gates and sampler mode for [`sample_masks`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskGates {
    /// Binarization cut on the `[0, 1]` rescaled output.
    pub threshold: f32,
    pub min_area: f64,
    pub max_area: f64,
    /// Ancestral sampling with `sqrt(beta)` noise when true; posterior-mean
    /// steps from a random start otherwise.
    #[serde(default = "default_true")]
    pub stochastic: bool,
}

fn default_true() -> bool {
    true
}

impl Default for MaskGates {
    fn default() -> Self {
        Self { threshold: 0.5, min_area: 0.01, max_area: 0.6, stochastic: true }
    }
}

impl MaskGates {
    pub fn validate(&self) -> Result<()> {
        let Self { threshold, min_area, max_area, .. } = *self;
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidRange(format!("threshold {threshold} outside (0, 1)")));
        }
        if !(0.0 <= min_area && min_area < max_area && max_area <= 1.0) {
            return Err(Error::InvalidRange(format!("area gates [{min_area}, {max_area}] invalid")));
        }
        Ok(())
    }
}

/// One accepted (or candidate) generated mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    /// Network output rescaled to `[0, 1]`.
    pub raw: ImageTensor,
    pub binary: BinaryMask,
    pub area_fraction: f64,
    pub seed: u64,
}

impl MaskSample {
    pub fn from_raw(raw: ImageTensor, threshold: f32, seed: u64) -> Self {
        let binary = BinaryMask::threshold(raw.height(), raw.width(), raw.data(), threshold)
            .expect("single-channel raw mask");
        let area_fraction = binary.area_fraction();
        Self { raw, binary, area_fraction, seed }
    }

    pub fn within(&self, min_area: f64, max_area: f64) -> bool {
        (min_area..=max_area).contains(&self.area_fraction)
    }
}

fn to_signed(mask: &BinaryMask) -> Vec<f32> {
    mask.data().iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect()
}

/// Trains the mask model with the plain ε objective on masks mapped to ±1.
pub fn train_mask_model(masks: &[BinaryMask], config: &MaskModelConfig) -> Result<Trained> {
    config.validate()?;
    if masks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let size = config.image_size;
    if let Some(m) = masks.iter().find(|m| m.height() != size || m.width() != size) {
        return Err(Error::SizeMismatch(format!("mask {}x{} but expected {size}x{size}", m.height(), m.width())));
    }
    let schedule = config.schedule.build()?;
    let signed: Vec<Vec<f32>> = masks.iter().map(to_signed).collect();
    let examples: Vec<Example<'_>> = signed.iter().map(|v| Example { image: v, mask: None }).collect();
    let mut ck = build_denoiser(&config.spec, config.seed)?.with_label("mask_model");
    let setup = TrainSetup {
        iterations: config.iterations,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        seed: crate::rng::derive_seed(config.seed, "train"),
        schedule: &schedule,
        shape: (1, size, size),
        objective: Objective::Epsilon,
        flips: true,
    };
    let trace = train_denoiser(&mut ck, None, &examples, &setup)?;
    ck.schedule = Some(config.schedule);
    Ok(Trained { checkpoint: ck, trace })
}

/// Draws masks until `n` pass the area gates or `10 n` draws are spent.
/// Draw `i` uses seed `item_seed(seed, i)`, so results do not depend on how
/// draws are batched.
pub fn sample_masks(
    model: &Checkpoint,
    n: usize,
    gates: &MaskGates,
    seed: u64,
    schedule: &NoiseSchedule,
    image_size: usize,
) -> Result<Vec<MaskSample>> {
    if n == 0 {
        return Err(Error::InvalidRange("need at least one mask".into()));
    }
    gates.validate()?;
    if model.spec.conditioning != Conditioning::None || model.spec.input_channels != 1 {
        return Err(Error::InvalidConfig("mask sampling needs an unconditional single-channel model".into()));
    }
    let budget = 10 * n;
    let unconditional = TriggerToken { text: "unconditional".into(), embedding: Vec::new() };
    let canvas = ImageTensor::filled(1, image_size, image_size, 0.0);
    let full = BinaryMask::ones(image_size, image_size);
    let mut accepted = Vec::with_capacity(n);
    let mut draws = 0;
    while accepted.len() < n && draws < budget {
        let want = (n - accepted.len()).min(MAX_SAMPLE_BATCH).min(budget - draws);
        let requests: Vec<GuidanceRequest<'_>> = (draws..draws + want)
            .map(|i| GuidanceRequest {
                background: canvas.clone(),
                mask: full.clone(),
                model,
                token: &unconditional,
                seed: item_seed(seed, i),
                stochastic: gates.stochastic,
            })
            .collect();
        for (pair, req) in generate_batch(&requests, schedule)?.into_iter().zip(&requests) {
            let raw_data = pair.image.data().iter().map(|v| (v + 1.0) / 2.0).collect();
            let raw = ImageTensor::new(1, image_size, image_size, raw_data)?;
            let sample = MaskSample::from_raw(raw, gates.threshold, req.seed);
            if sample.within(gates.min_area, gates.max_area) && accepted.len() < n {
                accepted.push(sample);
            }
        }
        draws += want;
    }
    if accepted.len() < n {
        return Err(Error::BudgetExhausted {
            requested: n,
            accepted: accepted.len(),
            draws,
            rate: accepted.len() as f64 / draws as f64,
        });
    }
    Ok(accepted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    FlipH,
    FlipV,
    /// Erosion with the given radius, one iteration.
    Erode(usize),
}

/// Applies `ops` left to right.
pub fn classic_augment(mask: &BinaryMask, ops: &[AugmentOp]) -> BinaryMask {
    ops.iter().fold(mask.clone(), |m, op| match *op {
        AugmentOp::FlipH => m.flip_horizontal(),
        AugmentOp::FlipV => m.flip_vertical(),
        AugmentOp::Erode(r) => erode_mask(&m, r, 1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_and_gates() {
        let raw = ImageTensor::filled(1, 4, 4, 0.4);
        let s = MaskSample::from_raw(raw, 0.5, 0);
        assert!(s.binary.is_empty());
        assert!(!s.within(0.01, 0.6));
        let raw = ImageTensor::new(1, 2, 2, vec![0.9, 0.1, 0.6, 0.5]).unwrap();
        let s = MaskSample::from_raw(raw, 0.5, 0);
        assert_eq!(s.binary.data(), &[1, 0, 1, 0]);
        assert_eq!(s.area_fraction, 0.5);
        let again = BinaryMask::threshold(2, 2, &s.binary.to_f32(), 0.5).unwrap();
        assert_eq!(again, s.binary);
    }

    #[test]
    fn flip_augment() {
        let m = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert_eq!(classic_augment(&m, &[AugmentOp::FlipH]).data(), &[0, 1, 0, 0]);
        assert_eq!(classic_augment(&m, &[AugmentOp::FlipH, AugmentOp::FlipH]), m);
    }

    #[test]
    fn spec_is_fixed() {
        let mut cfg = MaskModelConfig {
            spec: MaskModelConfig::fixed_spec(8, 32),
            iterations: 1,
            batch_size: 1,
            learning_rate: 1e-4,
            seed: 0,
            image_size: 64,
            schedule: ScheduleParams::linear(10),
        };
        assert!(cfg.validate().is_ok());
        cfg.spec.channel_widths = vec![32, 64, 128, 256];
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn untrained_model_exhausts_budget_with_narrow_gates() {
        // Zero-initialized output layer: every sample is pure noise, so about
        // half the pixels pass the threshold and an area gate of [0, 0.1]
        // rejects everything.
        let cfg_spec = MaskModelConfig::fixed_spec(8, 16);
        let ck = build_denoiser(&cfg_spec, 0).unwrap();
        let s = ScheduleParams::linear(3).build().unwrap();
        let err = sample_masks(&ck, 2, &MaskGates { max_area: 0.1, min_area: 0.0, ..Default::default() }, 1, &s, 64).unwrap_err();
        match err {
            Error::BudgetExhausted { requested, accepted, draws, .. } => {
                assert_eq!((requested, accepted, draws), (2, 0, 20));
            }
            e => panic!("unexpected {e}"),
        }
    }
}
