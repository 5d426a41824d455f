//! Mask-guided diffusion augmentation for segmentation: few-shot fine-tuning
//! of a token-conditioned DDPM with a masked loss, a diffusion mask generator,
//! background-preserving guided sampling, similarity-based curation, and a
//! compact segmenter that measures whether the synthetic pairs help.

pub mod curation;
pub mod diffusion;
pub mod error;
pub mod finetune;
pub mod image;
pub mod mask_gen;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod seg;

pub use error::{Error, Result};
pub use image::{BinaryMask, ImageMaskPair, ImageTensor, PairSource};
