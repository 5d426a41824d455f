//! Just enough neural-network machinery to train small diffusion U-Nets and
//! segmenters on a CPU: NCHW tensors, a reverse-mode graph with hand-written
//! backward rules, a residual U-Net and Adam.

mod graph;
mod params;
mod tensor;
mod unet;

pub use graph::{Graph, NodeGrads, NodeId};
pub use params::{Adam, AdamConfig, AdamSlot, ParamGrads, ParamId, ParamInfo, ParamSet};
pub use tensor::Tensor;
pub use unet::{groups_for, sinusoidal_embedding, Conditioning, UNet, UNetSpec};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("stored parameters do not match the network layout")]
    ParamMismatch,
}
