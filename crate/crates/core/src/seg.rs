//! Downstream check: a compact U-Net segmenter trained with focal + soft Dice
//! loss, scored with Dice and IoU.

use maskdiff_nn::{Adam, AdamConfig, Conditioning, Graph, ParamGrads, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffusion::{build_denoiser, Checkpoint, DenoiserSpec};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageMaskPair, ImageTensor};
use crate::rng::seeded;

const SMOOTH: f64 = 1.0;
const P_EPS: f64 = 1e-7;
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub learning_rate: f32,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Weight on the focal term; the rest goes to `1 - soft Dice`.
    pub loss_mix: f64,
    pub seed: u64,
    pub channel_widths: Vec<usize>,
    /// Space-to-depth factor of the segmenter stem.
    pub patch: usize,
    pub threshold: f32,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            image_size: 64,
            learning_rate: 1e-3,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            loss_mix: 0.5,
            seed: 0,
            channel_widths: vec![32, 64, 128, 256],
            patch: 4,
            threshold: 0.5,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("segmenter epochs and batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return Err(Error::InvalidConfig(format!("loss_mix {} outside [0, 1]", self.loss_mix)));
        }
        if !(self.learning_rate > 0.0) || !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig("learning rate must be positive and threshold in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn spec(&self, channels: usize) -> DenoiserSpec {
        DenoiserSpec {
            levels: self.channel_widths.len(),
            channel_widths: self.channel_widths.clone(),
            conditioning: Conditioning::None,
            timestep_embedding_dim: 0,
            input_channels: channels,
            output_channels: 1,
            patch: self.patch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub iou: f64,
    pub n_images: usize,
}

fn overlap(pred: &BinaryMask, target: &BinaryMask) -> Result<(usize, usize, usize)> {
    pred.same_shape(target)?;
    let inter = pred.data().iter().zip(target.data()).filter(|(&p, &t)| p == 1 && t == 1).count();
    Ok((inter, pred.count(), target.count()))
}

pub fn dice_score(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    let (i, p, t) = overlap(pred, target)?;
    Ok(if p + t == 0 { 1.0 } else { 2.0 * i as f64 / (p + t) as f64 })
}

pub fn iou_score(pred: &BinaryMask, target: &BinaryMask) -> Result<f64> {
    let (i, p, t) = overlap(pred, target)?;
    let union = p + t - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Focal + soft-Dice loss and its gradient with respect to the probabilities.
pub fn focal_dice_loss_and_grad(pred: &[f64], target: &[u8], cfg: &SegConfig) -> (f64, Vec<f64>) {
    let n = pred.len() as f64;
    let (g, a, mix) = (cfg.focal_gamma, cfg.focal_alpha, cfg.loss_mix);
    let mut focal = 0.0;
    let mut grad = vec![0.0; pred.len()];
    let (mut spy, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (i, (&p_raw, &y)) in pred.iter().zip(target).enumerate() {
        let p = p_raw.clamp(P_EPS, 1.0 - P_EPS);
        let clamped = p != p_raw;
        let (f, df) = if y == 1 {
            let q = 1.0 - p;
            (-a * q.powf(g) * p.ln(), -a * (-g * q.powf(g - 1.0) * p.ln() + q.powf(g) / p))
        } else {
            let q = 1.0 - p;
            (-(1.0 - a) * p.powf(g) * q.ln(), -(1.0 - a) * (g * p.powf(g - 1.0) * q.ln() - p.powf(g) / q))
        };
        focal += f;
        if !clamped {
            grad[i] = mix * df / n;
        }
        let yf = y as f64;
        spy += p_raw * yf;
        sp += p_raw;
        sy += yf;
    }
    let den = sp + sy + SMOOTH;
    let dice = (2.0 * spy + SMOOTH) / den;
    for (gi, &y) in grad.iter_mut().zip(target) {
        let d_dice = (2.0 * y as f64 * den - (2.0 * spy + SMOOTH)) / (den * den);
        *gi -= (1.0 - mix) * d_dice;
    }
    (mix * focal / n + (1.0 - mix) * (1.0 - dice), grad)
}

pub fn focal_dice_loss(pred_prob: &ImageTensor, target: &BinaryMask, config: &SegConfig) -> Result<f64> {
    pred_prob.ensure_mask_aligned(target, "focal_dice_loss")?;
    if pred_prob.channels() != 1 {
        return Err(Error::ShapeMismatch(format!("{} prediction channels, expected 1", pred_prob.channels())));
    }
    if let Some(&v) = pred_prob.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::PredictionOutOfRange(v));
    }
    let p: Vec<f64> = pred_prob.data().iter().map(|&v| v as f64).collect();
    Ok(focal_dice_loss_and_grad(&p, target.data(), config).0)
}

/// Anything that turns images into per-pixel foreground probabilities.
pub trait MaskPredictor {
    fn predict_probs(&self, images: &[&ImageTensor]) -> Vec<Vec<f32>>;
}

impl MaskPredictor for Checkpoint {
    fn predict_probs(&self, images: &[&ImageTensor]) -> Vec<Vec<f32>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let logits = self.predict(ImageTensor::batch(chunk), &[], None);
            for i in 0..chunk.len() {
                out.push(logits.sample(i).iter().map(|&z| sigmoid(z)).collect());
            }
        }
        out
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Per-image `(dice, iou)` after thresholding.
pub fn evaluate_per_image(
    model: &(impl MaskPredictor + ?Sized),
    test: &[ImageMaskPair],
    threshold: f32,
) -> Result<Vec<(f64, f64)>> {
    if test.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidRange(format!("threshold {threshold} outside (0, 1)")));
    }
    let images: Vec<&ImageTensor> = test.iter().map(|p| &p.image).collect();
    let probs = model.predict_probs(&images);
    test.iter()
        .zip(probs)
        .map(|(pair, p)| {
            let pred = BinaryMask::threshold(pair.mask.height(), pair.mask.width(), &p, threshold)?;
            Ok((dice_score(&pred, &pair.mask)?, iou_score(&pred, &pair.mask)?))
        })
        .collect()
}

pub fn evaluate(model: &(impl MaskPredictor + ?Sized), test: &[ImageMaskPair], threshold: f32) -> Result<SegMetrics> {
    let per = evaluate_per_image(model, test, threshold)?;
    let n = per.len() as f64;
    Ok(SegMetrics {
        dice: per.iter().map(|d| d.0).sum::<f64>() / n,
        iou: per.iter().map(|d| d.1).sum::<f64>() / n,
        n_images: per.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: SegMetrics,
}

#[derive(Clone, Debug)]
pub struct SegOutcome {
    pub checkpoint: Checkpoint,
    pub best: SegMetrics,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
}

/// Trains from scratch and returns the weights of the epoch with the highest
/// validation Dice (earliest on ties).
pub fn train_segmenter(train: &[ImageMaskPair], val: &[ImageMaskPair], config: &SegConfig) -> Result<SegOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let (c, h, w) = train[0].image.shape();
    if let Some(p) = train.iter().chain(val).find(|p| p.image.shape() != (c, h, w)) {
        return Err(Error::SizeMismatch(format!("pair {} is {:?}, expected {:?}", p.id, p.image.shape(), (c, h, w))));
    }
    let mut ck = build_denoiser(&config.spec(c), config.seed)?.with_label("segmenter");
    let mut rng = seeded(crate::rng::derive_seed(config.seed, "order"));
    let mut adam = Adam::new(ck.params(), AdamConfig::with_lr(config.learning_rate));
    let mut grads = ParamGrads::zeros_like(ck.params());
    let plane = h * w;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(SegMetrics, usize, Checkpoint)> = None;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let b = batch.len();
            let images: Vec<&ImageTensor> = batch.iter().map(|&i| &train[i].image).collect();
            grads.zero();
            let (net, params) = ck.parts_mut();
            let loss = {
                let mut g = Graph::new(params);
                let xi = g.input(ImageTensor::batch(&images));
                let out = net.forward(&mut g, xi, &[], None);
                let logits = g.value(out).data();
                let mut grad_out = vec![0.0f32; b * plane];
                let mut loss = 0.0;
                for (s, &i) in batch.iter().enumerate() {
                    let z = &logits[s * plane..(s + 1) * plane];
                    let p: Vec<f64> = z.iter().map(|&v| sigmoid(v) as f64).collect();
                    let (l, gp) = focal_dice_loss_and_grad(&p, train[i].mask.data(), config);
                    loss += l / b as f64;
                    for j in 0..plane {
                        grad_out[s * plane + j] = (gp[j] * p[j] * (1.0 - p[j]) / b as f64) as f32;
                    }
                }
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step, detail: format!("segmenter loss {loss} in epoch {epoch}") });
                }
                g.backward(out, Tensor::from_vec([b, 1, h, w], grad_out), &mut grads);
                loss
            };
            adam.step(params, &grads);
            epoch_loss += loss * b as f64;
            step += 1;
        }
        let val_metrics = evaluate(&ck, val, config.threshold)?;
        trace.push(EpochRecord { epoch, train_loss: epoch_loss / train.len() as f64, val: val_metrics });
        if best.as_ref().is_none_or(|(m, _, _)| val_metrics.dice > m.dice) {
            best = Some((val_metrics, epoch, ck.clone()));
        }
    }
    let (best, best_epoch, checkpoint) = best.expect("at least one epoch");
    Ok(SegOutcome { checkpoint, best, best_epoch, trace })
}
