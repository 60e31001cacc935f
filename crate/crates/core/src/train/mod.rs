//! Patch-sampled U-Net training with Adam and the Dice Focal loss.

mod loss;

pub use loss::{dice_focal_loss, dice_focal_loss_grad, dice_focal_parts, LossParams, LossParts};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::{apply_plan, sample_plan, AugmentationSpec};
use crate::checkpoint::save_checkpoint;
use crate::dataio::{self, DatasetSplit, LabelledImage, WindowSample};
use crate::error::{Error, Result};
use crate::inference;
use crate::model::{build_unet, Model, UNetConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    pub epochs: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Seeds {
    pub split: u64,
    pub init: u64,
    pub sampling: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    pub windows_per_image: usize,
    pub window_width: usize,
    pub window_height: usize,
    pub loss: LossParams,
    pub adam: AdamParams,
    pub augmentation: AugmentationSpec,
    /// Architecture; its `init_seed` is replaced by `seeds.init`.
    pub model: UNetConfig,
    pub seeds: Seeds,
    /// Checkpoints are written here when set.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// 600 epochs (300 at 1e-3 then 300 at 1e-4), batches of 20, 20 windows of
    /// 320×240 per image per epoch.
    fn default() -> Self {
        TrainConfig {
            total_epochs: 600,
            phases: vec![
                Phase {
                    epochs: 300,
                    learning_rate: 1e-3,
                },
                Phase {
                    epochs: 300,
                    learning_rate: 1e-4,
                },
            ],
            batch_size: 20,
            windows_per_image: 20,
            window_width: dataio::DEFAULT_WINDOW.0,
            window_height: dataio::DEFAULT_WINDOW.1,
            loss: LossParams::default(),
            adam: AdamParams::default(),
            augmentation: AugmentationSpec::default(),
            model: UNetConfig::default(),
            seeds: Seeds::default(),
            checkpoint_dir: None,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    /// A single-phase schedule of `epochs` at `learning_rate`.
    pub fn single_phase(mut self, epochs: usize, learning_rate: f64) -> Self {
        self.total_epochs = epochs;
        self.phases = vec![Phase { epochs, learning_rate }];
        self
    }

    pub fn model_config(&self) -> UNetConfig {
        UNetConfig {
            init_seed: self.seeds.init,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: usize = self.phases.iter().map(|p| p.epochs).sum();
        if sum != self.total_epochs {
            return Err(Error::Config(format!(
                "phase epochs sum to {sum} but total_epochs is {}",
                self.total_epochs
            )));
        }
        if let Some(p) = self
            .phases
            .iter()
            .find(|p| !(p.learning_rate > 0.0 && p.learning_rate.is_finite()))
        {
            return Err(Error::Config(format!("invalid learning rate {}", p.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.windows_per_image == 0 {
            return Err(Error::Config("windows_per_image must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be at least 1".into()));
        }
        self.loss.validate()?;
        self.augmentation.validate()?;
        self.model.validate()?;
        let d = self.model.divisor();
        if self.window_width % d != 0 || self.window_height % d != 0 {
            return Err(Error::Config(format!(
                "window {}x{} must be divisible by {d} for a depth-{} network",
                self.window_width, self.window_height, self.model.depth
            )));
        }
        Ok(())
    }

    /// Learning rate in effect for 1-based `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let mut end = 0;
        for p in &self.phases {
            end += p.epochs;
            if epoch <= end {
                return p.learning_rate;
            }
        }
        self.phases.last().map_or(0.0, |p| p.learning_rate)
    }

    fn is_phase_boundary(&self, epoch: usize) -> bool {
        let mut end = 0;
        self.phases.iter().any(|p| {
            end += p.epochs;
            end == epoch
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss,seconds\n");
        for r in &self.epochs {
            let val = r.val_loss.map(|v| format!("{v:.8}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:e},{:.8},{},{:.3}",
                r.epoch, r.learning_rate, r.train_loss, val, r.seconds
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Hooks into the training loop; every method has a no-op default.
pub trait TrainObserver {
    /// Called with the augmented windows drawn for an epoch, before training on them.
    fn on_windows(&mut self, _epoch: usize, _windows: &[WindowSample]) {}

    /// Called after each epoch. Returning `Break` ends training early.
    fn on_epoch_end(&mut self, _epoch: usize, _model: &Model, _record: &EpochRecord) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

impl TrainObserver for () {}

/// Adam with bias-corrected moments.
pub struct Adam {
    params: AdamParams,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(model: &Model, params: AdamParams) -> Self {
        let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam {
            params,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f32>], learning_rate: f64) {
        self.step += 1;
        let (b1, b2) = (self.params.beta1, self.params.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let step_size = (learning_rate / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        let eps = self.params.epsilon as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((p, g), m), v) in model
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= step_size * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        }
    }
}

/// Batch loss and parameter gradients for a set of windows.
pub fn batch_gradients(model: &Model, batch: &[WindowSample], loss: &LossParams) -> Result<(f64, Vec<Vec<f32>>)> {
    let traces = batch
        .par_iter()
        .map(|w| model.forward_train(&w.image))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.probs().iter().map(|&p| p as f64))
        .collect();
    let targets: Vec<u8> = batch.iter().flat_map(|w| w.mask.as_slice().iter().copied()).collect();
    let (value, dprobs) = dice_focal_loss_grad(&probs, &targets, loss)?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let dprobs: Vec<f32> = dprobs.into_iter().map(|g| g as f32).collect();
    let mut offsets = Vec::with_capacity(traces.len());
    let mut acc = 0;
    for t in &traces {
        offsets.push(acc);
        acc += t.probs().len();
    }
    let per_sample = traces
        .par_iter()
        .zip(offsets.par_iter())
        .map(|(t, &off)| model.backward(t, &dprobs[off..off + t.probs().len()]))
        .collect::<Result<Vec<_>>>()?;
    drop(traces);
    let mut iter = per_sample.into_iter();
    let mut total = iter.next().unwrap_or_default();
    for g in iter {
        for (a, b) in total.iter_mut().zip(g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    Ok((value, total))
}

/// Dice Focal loss over full images, padded as for inference.
pub fn full_image_loss(model: &Model, images: &[&LabelledImage], loss: &LossParams) -> Result<f64> {
    let maps = images
        .iter()
        .map(|s| inference::segment_full(model, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let probs: Vec<f64> = maps
        .iter()
        .flat_map(|m| m.values.as_slice().iter().map(|&p| p as f64))
        .collect();
    let targets: Vec<u8> = images
        .iter()
        .flat_map(|s| s.mask.labels().as_slice().iter().copied())
        .collect();
    dice_focal_loss(&probs, &targets, loss)
}

/// Draws this epoch's windows: `windows_per_image` per image, each with a
/// fresh augmentation plan, shuffled across images.
pub fn draw_epoch_windows(
    config: &TrainConfig,
    images: &[&LabelledImage],
    rng: &mut rng::SeededRng,
) -> Result<Vec<WindowSample>> {
    let mut windows = Vec::with_capacity(images.len() * config.windows_per_image);
    for s in images {
        let raw = dataio::sample_windows(
            &s.image,
            &s.mask,
            config.windows_per_image,
            config.window_width,
            config.window_height,
            rng,
        )?;
        for w in raw {
            let plan = sample_plan(&config.augmentation, rng);
            windows.push(apply_plan(&plan, &w));
        }
    }
    windows.shuffle(rng);
    Ok(windows)
}

pub fn run_training(
    config: &TrainConfig,
    split: &DatasetSplit,
    data: &[LabelledImage],
) -> Result<(Model, TrainHistory)> {
    run_training_with(config, split, data, &mut ())
}

fn checkpoint_metadata(config: &TrainConfig, epoch: usize) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("epochs_completed".into(), epoch.to_string());
    meta.insert("seed.split".into(), config.seeds.split.to_string());
    meta.insert("seed.init".into(), config.seeds.init.to_string());
    meta.insert("seed.sampling".into(), config.seeds.sampling.to_string());
    meta.insert("loss.lambda_dice".into(), config.loss.lambda_dice.to_string());
    meta.insert("loss.lambda_focal".into(), config.loss.lambda_focal.to_string());
    meta.insert("loss.gamma".into(), config.loss.gamma.to_string());
    meta.insert("loss.epsilon".into(), config.loss.epsilon.to_string());
    meta.insert("loss.prob_clip".into(), config.loss.prob_clip.to_string());
    meta.insert("init".into(), "he-normal fan-in".into());
    meta.insert("augmentation.enabled".into(), config.augmentation.enabled.to_string());
    meta
}

/// Trains a fresh network on `split.train_ids`, reporting validation loss on
/// `split.val_ids` after each epoch (monitoring only).
pub fn run_training_with(
    config: &TrainConfig,
    split: &DatasetSplit,
    data: &[LabelledImage],
    observer: &mut dyn TrainObserver,
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if split.train_ids.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let train = dataio::select(data, &split.train_ids)?;
    let val = dataio::select(data, &split.val_ids)?;
    for s in &train {
        if s.image.width() < config.window_width || s.image.height() < config.window_height {
            return Err(Error::Dimension(format!(
                "training image '{}' ({}x{}) is smaller than the {}x{} window",
                s.id(),
                s.image.width(),
                s.image.height(),
                config.window_width,
                config.window_height
            )));
        }
    }
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut model = build_unet(&config.model_config())?;
    let mut adam = Adam::new(&model, config.adam);
    let mut sampler = rng::seeded(config.seeds.sampling);
    let mut history = TrainHistory::default();

    for epoch in 1..=config.total_epochs {
        let started = Instant::now();
        let lr = config.learning_rate_at(epoch);
        let windows = draw_epoch_windows(config, &train, &mut sampler)?;
        observer.on_windows(epoch, &windows);

        let mut weighted = 0.0;
        for (bi, batch) in windows.chunks(config.batch_size).enumerate() {
            let (value, grads) = batch_gradients(&model, batch, &config.loss)?;
            if !value.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            adam.step(&mut model, &grads, lr);
            weighted += value * batch.len() as f64;
        }
        let train_loss = weighted / windows.len() as f64;
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(full_image_loss(&model, &val, &config.loss)?)
        };
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        history.epochs.push(record.clone());

        if let Some(dir) = &config.checkpoint_dir {
            if epoch % config.checkpoint_every == 0 || config.is_phase_boundary(epoch) {
                let path = dir.join(format!("epoch_{epoch:04}.ckpt"));
                save_checkpoint(&model, &checkpoint_metadata(config, epoch), &path)?;
            }
        }
        if observer.on_epoch_end(epoch, &model, &record).is_break() {
            break;
        }
    }
    Ok((model, history))
}

/// Metadata recorded alongside a final model.
pub fn final_metadata(config: &TrainConfig, history: &TrainHistory) -> BTreeMap<String, String> {
    checkpoint_metadata(config, history.len())
}
