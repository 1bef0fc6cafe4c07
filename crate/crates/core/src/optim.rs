//! Adam with AMSGrad, mini-batch training and evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SliceClip;
use crate::error::{Error, Result};
use crate::models::{Model, ModelWeights};
use crate::scorer::FrameScorer;
use crate::stats::pearson;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub amsgrad: bool,
    /// Global L2 norm the gradient is clipped to before each step.
    pub grad_clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            amsgrad: true,
            grad_clip_norm: Some(5.0),
        }
    }
}

/// Moment estimates for every parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    v_hat: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            v_hat: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn max_second_moments(&self) -> &[Vec<f64>] {
        &self.v_hat
    }

    /// One update of `params` from `grads` (same order and shapes).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            g.ensure_dims("adam_step", p.dims())?;
        }
        if self.m.is_empty() {
            let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
            self.m = zeros();
            self.v = zeros();
            self.v_hat = zeros();
        } else if self.m.len() != params.len()
            || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::invalid("adam_step", "parameter layout changed between steps"));
        }

        let clip = match self.config.grad_clip_norm {
            Some(max_norm) => {
                let norm = grads.iter().map(|g| g.sum_sq()).sum::<f64>().sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let step_size = c.lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t));
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v, v_hat) = (&mut self.m[k], &mut self.v[k], &mut self.v_hat[k]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let denom = if c.amsgrad {
                    v_hat[j] = v_hat[j].max(v[j]);
                    v_hat[j]
                } else {
                    v[j]
                };
                *w -= step_size * m[j] / (denom.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    pub fn step_weights(&mut self, weights: &mut ModelWeights, grads: &ModelWeights) -> Result<()> {
        let g: Vec<&Tensor> = grads.iter().map(|(_, t)| t).collect();
        let mut p: Vec<&mut Tensor> = weights.tensors_mut().collect();
        self.step(&mut p, &g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            val_fraction: 0.10,
            seed: 0,
            shuffle: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(
                "train",
                format!("val_fraction {} outside [0, 1)", self.val_fraction),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train", "batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Per-step mini-batch losses, in order.
    pub step_losses: Vec<f64>,
}

impl History {
    /// `epoch,train_mse,val_mse` with an empty val column when nothing was held out.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for r in &self.epochs {
            let val = r.val_mse.map(|v| format!("{v:e}")).unwrap_or_default();
            s.push_str(&format!("{},{:e},{}\n", r.epoch, r.train_mse, val));
        }
        s
    }
}

/// Per-clip losses and summed gradients over `indices`, in index order so
/// the result does not depend on the thread count.
fn batch_gradient(model: &Model, pairs: &[(Tensor, Tensor)], indices: &[usize]) -> Result<(Vec<f64>, ModelWeights)> {
    let parts: Vec<(f64, ModelWeights)> = indices
        .par_iter()
        .map(|&i| model.loss_and_grad(&pairs[i].0, &pairs[i].1))
        .collect::<Result<_>>()?;
    let mut losses = Vec::with_capacity(parts.len());
    let mut iter = parts.into_iter();
    let (l0, mut total) = iter.next().expect("non-empty batch");
    losses.push(l0);
    for (l, g) in iter {
        losses.push(l);
        total.add_assign(&g);
    }
    Ok((losses, total))
}

fn mean_loss(model: &Model, pairs: &[(Tensor, Tensor)], indices: &[usize]) -> Result<f64> {
    let losses: Vec<f64> = indices
        .par_iter()
        .map(|&i| model.loss(&pairs[i].0, &pairs[i].1))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains `model` in place on whole-frame MSE. Predictors learn frame `T`
/// from frames `0..T`; the autoencoder reconstructs frames `0..T`.
pub fn train(model: &mut Model, clips: &[SliceClip], config: &TrainConfig) -> Result<History> {
    config.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("train", "empty dataset"));
    }
    let pairs: Vec<(Tensor, Tensor)> = clips
        .iter()
        .map(|c| model.split_clip(&c.frames))
        .collect::<Result<_>>()?;
    for (x, _) in &pairs {
        x.ensure_dims("train", pairs[0].0.dims())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if config.shuffle {
        order.shuffle(&mut rng);
    }
    let n_val = (config.val_fraction * pairs.len() as f64).ceil() as usize;
    if n_val >= pairs.len() {
        return Err(Error::invalid(
            "train",
            format!("validation split leaves no training clips ({} total)", pairs.len()),
        ));
    }
    let (val, train_idx) = order.split_at(n_val);
    let val = val.to_vec();
    let mut train_idx = train_idx.to_vec();

    let mut adam = Adam::new(config.adam);
    let mut history = History::default();
    for epoch in 1..=config.epochs {
        if config.shuffle {
            train_idx.shuffle(&mut rng);
        }
        let mut sum = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            let (losses, mut grads) = batch_gradient(model, &pairs, batch)?;
            grads.scale(1.0 / batch.len() as f64);
            adam.step_weights(model.weights_mut(), &grads)?;
            let batch_sum: f64 = losses.iter().sum();
            sum += batch_sum;
            history.step_losses.push(batch_sum / batch.len() as f64);
        }
        let val_mse = if val.is_empty() {
            None
        } else {
            Some(mean_loss(model, &pairs, &val)?)
        };
        let record = EpochRecord {
            epoch,
            train_mse: sum / train_idx.len() as f64,
            val_mse,
        };
        log::info!(
            "epoch {epoch}: train {:.6e} val {}",
            record.train_mse,
            val_mse.map_or("-".into(), |v| format!("{v:.6e}"))
        );
        history.epochs.push(record);
    }
    Ok(history)
}

/// Running masked MSE and per-frame Pearson correlation.
#[derive(Debug, Clone, Default)]
pub struct FrameMetrics {
    sse: f64,
    count: usize,
    pearson_sum: f64,
    pearson_frames: usize,
    undefined_frames: usize,
}

impl FrameMetrics {
    /// Adds one predicted frame; pixels with mask 0 are ignored.
    pub fn add_frame(&mut self, pred: &[f64], truth: &[f64], mask: &[f64]) -> Result<()> {
        let (mut p, mut t) = (Vec::new(), Vec::new());
        for ((&a, &b), &m) in pred.iter().zip(truth).zip(mask) {
            if m != 0.0 {
                p.push(a);
                t.push(b);
            }
        }
        if p.len() < 2 {
            return Err(Error::Degenerate(format!(
                "correlation needs at least 2 masked pixels, frame has {}",
                p.len()
            )));
        }
        self.sse += p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        self.count += p.len();
        match pearson(&p, &t) {
            Some(r) => {
                self.pearson_sum += r;
                self.pearson_frames += 1;
            }
            None => self.undefined_frames += 1,
        }
        Ok(())
    }

    pub fn mse(&self) -> f64 {
        self.sse / self.count as f64
    }

    /// Mean over frames where the correlation is defined (both sides
    /// non-constant within the mask).
    pub fn mean_pearson(&self) -> Option<f64> {
        (self.pearson_frames > 0).then(|| self.pearson_sum / self.pearson_frames as f64)
    }

    pub fn undefined_frames(&self) -> usize {
        self.undefined_frames
    }

    pub fn frames(&self) -> usize {
        self.pearson_frames + self.undefined_frames
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub mse: f64,
    pub mean_pearson: f64,
    pub frames: usize,
}

/// Masked MSE and mean per-frame Pearson of a scorer over clips. Clips must
/// hold at least `scorer.window_len()` frames.
pub fn evaluate(scorer: &dyn FrameScorer, clips: &[SliceClip]) -> Result<Evaluation> {
    let offsets = scorer.scored_offsets();
    let per_clip: Vec<(Tensor, &SliceClip)> = clips
        .par_iter()
        .map(|c| {
            let frames = c.frames.time_range(0..scorer.window_len());
            scorer.predict(&frames).map(|p| (p, c))
        })
        .collect::<Result<_>>()?;
    let mut metrics = FrameMetrics::default();
    for (pred, clip) in &per_clip {
        for (k, &off) in offsets.iter().enumerate() {
            let p = pred.time_slice(k);
            let t = clip.frames.time_slice(off);
            metrics.add_frame(p.data(), t.data(), clip.mask.data())?;
        }
    }
    let mean_pearson = metrics
        .mean_pearson()
        .ok_or_else(|| Error::Degenerate("correlation undefined on every frame".into()))?;
    Ok(Evaluation {
        mse: metrics.mse(),
        mean_pearson,
        frames: metrics.frames(),
    })
}
