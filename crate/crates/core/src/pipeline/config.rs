//! Run configuration: one root seed, named per-stage streams, and the two
//! presets (`toy` for desk runs, `full` for the original-scale counts).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::ErosionSettings;
use crate::diffusion::{Conditioning, DenoiserSpec, ScheduleParams, WeightMode};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, MaskMode, TriggerToken};
use crate::mask_gen::{MaskGates, MaskModelConfig};
use crate::rng::derive_seed;
use crate::seg::SegConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Toy,
    Full,
}

/// Where generation canvases come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundSource {
    /// Dataset backgrounds when present, repaired train images otherwise.
    Auto,
    Dataset,
    Repair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundConfig {
    pub source: BackgroundSource,
    /// Inverted-mask fine-tune used when repairing.
    pub finetune: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStageConfig {
    pub model: MaskModelConfig,
    pub n_masks: usize,
    pub gates: MaskGates,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub n_backgrounds: usize,
    pub n_generated: usize,
    pub stochastic: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub lo: f64,
    pub hi: f64,
    pub erosion: ErosionSettings,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self { lo: 0.5, hi: 0.95, erosion: ErosionSettings::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    pub image_size: usize,
    /// Trigger word bound to the lesion concept.
    pub token: String,
    /// Upper bound on pairs used for fine-tuning, taken from the train split.
    pub finetune_pairs: usize,
    /// Architecture of the lesion and background generators.
    pub denoiser: DenoiserSpec,
    /// Seed of the shared randomly initialized base network.
    pub base_seed: u64,
    pub finetune: FinetuneConfig,
    pub background: BackgroundConfig,
    pub masks: MaskStageConfig,
    pub guidance: GuidanceConfig,
    pub curation: CurationConfig,
    pub seg: SegConfig,
}

fn denoiser(widths: &[usize], patch: usize, temb: usize, channels: usize) -> DenoiserSpec {
    DenoiserSpec {
        levels: widths.len(),
        channel_widths: widths.to_vec(),
        conditioning: Conditioning::TriggerToken,
        timestep_embedding_dim: temb,
        input_channels: channels,
        output_channels: channels,
        patch,
    }
}

impl PipelineConfig {
    /// Desk-scale preset: 64x64 grayscale, T = 200, 30 fine-tune pairs,
    /// 2000 iterations, 50 guiding masks, 150 generated pairs.
    pub fn toy(seed: u64) -> Self {
        let size = 64;
        let schedule = ScheduleParams { weight_mode: WeightMode::Snr, ..ScheduleParams::linear(200) };
        let finetune = FinetuneConfig {
            iterations: 2000,
            batch_size: 2,
            learning_rate: 1e-3,
            mask_mode: MaskMode::Lesion,
            seed: derive_seed(seed, "finetune"),
            schedule,
            image_size: size,
        };
        let background = BackgroundConfig {
            source: BackgroundSource::Auto,
            finetune: FinetuneConfig {
                mask_mode: MaskMode::Inverted,
                seed: derive_seed(seed, "background"),
                ..finetune.clone()
            },
        };
        // The mask network runs at half resolution; its samples are
        // upsampled by nearest neighbour.
        let masks = MaskStageConfig {
            model: MaskModelConfig {
                spec: MaskModelConfig::fixed_spec(4, 128),
                iterations: 600,
                batch_size: 8,
                learning_rate: 1e-3,
                seed: derive_seed(seed, "mask_model"),
                image_size: 32,
                schedule: ScheduleParams::linear(200),
            },
            n_masks: 50,
            gates: MaskGates { stochastic: false, ..MaskGates::default() },
            seed: derive_seed(seed, "mask_sampling"),
        };
        Self {
            profile: Profile::Toy,
            seed,
            image_size: size,
            token: "lsn0".into(),
            finetune_pairs: 30,
            denoiser: denoiser(&[16, 32, 64], 4, 64, 1),
            base_seed: derive_seed(seed, "base"),
            finetune,
            background,
            masks,
            guidance: GuidanceConfig {
                n_backgrounds: 50,
                n_generated: 150,
                stochastic: true,
                seed: derive_seed(seed, "generate"),
            },
            curation: CurationConfig::default(),
            seg: SegConfig { image_size: size, seed: derive_seed(seed, "segment"), ..SegConfig::default() },
        }
    }

    /// Original-scale preset: 512x512 RGB, T = 1000, 1500 generated pairs
    /// (use [`Self::with_generated`] for the 2750 setting). Not runnable on a
    /// desk machine in reasonable time.
    pub fn full(seed: u64) -> Self {
        let mut c = Self::toy(seed);
        let size = 512;
        let schedule = ScheduleParams::linear(1000);
        c.profile = Profile::Full;
        c.image_size = size;
        c.denoiser = denoiser(&[64, 128, 256, 512], 8, 256, 3);
        c.finetune.learning_rate = 1e-4;
        c.finetune.schedule = schedule;
        c.finetune.image_size = size;
        c.background.finetune = FinetuneConfig {
            mask_mode: MaskMode::Inverted,
            seed: derive_seed(seed, "background"),
            ..c.finetune.clone()
        };
        c.masks.model.spec = MaskModelConfig::fixed_spec(1, 128);
        c.masks.model.image_size = 64;
        c.masks.model.iterations = 20_000;
        c.masks.model.batch_size = 32;
        c.masks.model.learning_rate = 1e-4;
        c.masks.model.schedule = schedule;
        c.masks.gates.stochastic = true;
        c.guidance.n_generated = 1500;
        c.seg.image_size = size;
        c.seg.epochs = 800;
        c.seg.channel_widths = vec![32, 64, 128, 256, 512];
        c.seg.patch = 1;
        c
    }

    pub fn with_generated(mut self, n: usize) -> Self {
        self.guidance.n_generated = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.guidance.n_generated == 0 || self.guidance.n_backgrounds == 0 || self.masks.n_masks == 0 {
            return Err(Error::InvalidConfig("n_generated, n_backgrounds and n_masks must be at least 1".into()));
        }
        if self.finetune_pairs == 0 {
            return Err(Error::InvalidConfig("finetune_pairs must be at least 1".into()));
        }
        TriggerToken::validate_text(&self.token)?;
        self.denoiser.validate()?;
        self.finetune.validate()?;
        self.background.finetune.validate()?;
        self.masks.model.validate()?;
        self.masks.gates.validate()?;
        self.seg.validate()?;
        if self.finetune.mask_mode != MaskMode::Lesion || self.background.finetune.mask_mode != MaskMode::Inverted {
            return Err(Error::InvalidConfig("lesion fine-tune must use lesion masks, background fine-tune inverted".into()));
        }
        let size = self.image_size;
        for (what, s) in [
            ("finetune", self.finetune.image_size),
            ("background", self.background.finetune.image_size),
            ("seg", self.seg.image_size),
        ] {
            if s != size {
                return Err(Error::InvalidConfig(format!("{what}.image_size {s} differs from image_size {size}")));
            }
        }
        let m = self.masks.model.image_size;
        if m > size || size % m != 0 {
            return Err(Error::InvalidConfig(format!("mask size {m} must divide image size {size}")));
        }
        if size % self.denoiser.size_multiple() != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {size} not divisible by {}",
                self.denoiser.size_multiple()
            )));
        }
        if !(-1.0 <= self.curation.lo && self.curation.lo < self.curation.hi && self.curation.hi <= 1.0) {
            return Err(Error::InvalidRange(format!(
                "curation thresholds lo={} hi={}",
                self.curation.lo, self.curation.hi
            )));
        }
        Ok(())
    }

    /// Every seed consumed by the run, by stream name.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("root".into(), self.seed),
            ("base".into(), self.base_seed),
            ("finetune".into(), self.finetune.seed),
            ("background".into(), self.background.finetune.seed),
            ("mask_model".into(), self.masks.model.seed),
            ("mask_sampling".into(), self.masks.seed),
            ("generate".into(), self.guidance.seed),
            ("segment".into(), self.seg.seed),
        ])
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::unreadable(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for c in [PipelineConfig::toy(3), PipelineConfig::full(3), PipelineConfig::full(3).with_generated(2750)] {
            c.validate().unwrap();
            assert_eq!(PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn seeds_differ_per_stage_and_root() {
        let a = PipelineConfig::toy(1).seeds();
        let b = PipelineConfig::toy(2).seeds();
        let mut vals: Vec<u64> = a.values().copied().collect();
        vals.sort_unstable();
        vals.dedup();
        assert_eq!(vals.len(), a.len());
        assert!(a.iter().filter(|(k, _)| *k != "root").all(|(k, v)| b[k] != *v));
    }

    #[test]
    fn rejects_zero_generated() {
        let c = PipelineConfig::toy(0).with_generated(0);
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = PipelineConfig::toy(0);
        c.masks.model.image_size = 48;
        assert!(c.validate().is_err());
    }
}
