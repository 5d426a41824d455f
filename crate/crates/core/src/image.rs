//! Image, mask and pair types shared by every stage.

use maskdiff_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `[channels, height, width]` float image. Loaded and generated images are
/// normalized to `[-1, 1]`; intermediate diffusion latents share the type but
/// may leave that range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!("degenerate image shape {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn zeros_like(other: &ImageTensor) -> Self {
        Self::filled(other.channels, other.height, other.width, 0.0)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every value is finite and within `[-1, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && v.abs() <= 1.0)
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    pub fn ensure_mask_aligned(&self, mask: &BinaryMask, what: &str) -> Result<()> {
        if (self.height, self.width) != (mask.height(), mask.width()) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: image {}x{} vs mask {}x{}",
                self.height,
                self.width,
                mask.height(),
                mask.width()
            )));
        }
        Ok(())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, self.channels, self.height, self.width], self.data.clone())
    }

    /// Stacks equally shaped images into an NCHW batch.
    pub fn batch(images: &[&ImageTensor]) -> Tensor {
        let first = images[0];
        let slices: Vec<&[f32]> = images.iter().map(|im| im.data()).collect();
        Tensor::stack(&slices, first.channels, first.height, first.width)
    }

    /// Mean over all channels of the pixels selected by `mask`.
    pub fn masked_mean_std(&self, mask: &BinaryMask) -> Option<(f64, f64)> {
        let plane = self.height * self.width;
        let vals: Vec<f64> = (0..self.channels)
            .flat_map(|c| {
                mask.data()
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m == 1)
                    .map(move |(i, _)| self.data[c * plane + i] as f64)
            })
            .collect();
        if vals.is_empty() {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        Some((mean, var.sqrt()))
    }
}

/// A binary `{0, 1}` mask; 1 marks the lesion / generation region.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!("{} values for a {height}x{width} mask", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidRange(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    /// Builds a mask from a predicate over `(y, x)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    /// Ones where `value > threshold`.
    pub fn threshold(height: usize, width: usize, values: &[f32], threshold: f32) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!("{} values for a {height}x{width} mask", values.len())));
        }
        Ok(Self { height, width, data: values.iter().map(|&v| (v > threshold) as u8).collect() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// `self ⊆ other` (as pixel sets).
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.len() == other.data.len() && self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x) == 1)
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| self.get(self.height - 1 - y, x) == 1)
    }

    /// Nearest-neighbour resize; keeps the mask binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |y, x| self.get(y * self.height / height, x * self.width / width) == 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Real,
    Synthetic,
}

/// An image with its lesion mask: the unit that flows through the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMaskPair {
    pub id: String,
    pub image: ImageTensor,
    pub mask: BinaryMask,
    pub source: PairSource,
}

impl ImageMaskPair {
    pub fn new(id: impl Into<String>, image: ImageTensor, mask: BinaryMask, source: PairSource) -> Result<Self> {
        image.ensure_mask_aligned(&mask, "pair")?;
        Ok(Self { id: id.into(), image, mask, source })
    }
}
