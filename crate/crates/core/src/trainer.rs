//! MSE training with Adam over a staged noise curriculum.
//!
//! Every epoch draws its shuffle order, augmentations and noise from an RNG
//! stream keyed by `(seed, stage, epoch)`, so a run resumed from an epoch
//! boundary replays exactly the same data as an uninterrupted one.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{model_from_checkpoint, Checkpoint, EXTRA_KEY_PREFIX, EXTRA_TENSOR_PREFIX};
use crate::error::{bail, Error, Result};
use crate::hsidata::{augment, crop_patches, stack, Augment, HsiCube, SCALE_FACTORS};
use crate::kv::KvText;
use crate::network::{man_forward, Man};
use crate::noise::{add_complex_with, add_gaussian_with, sample_sigma, ComplexKind, ComplexNoiseParams, SigmaMode};
use crate::params::ModelParams;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Mean squared error between two same-shape tensors.
pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    tape.mse(pred, target)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments mirroring a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros = |p: &ModelParams<T>| {
            let mut z = ModelParams::new();
            for (n, t) in p.iter() {
                z.insert(n, Tensor::zeros(t.shape().to_vec())).expect("names unique");
            }
            z
        };
        Adam { step: 0, m: zeros(params), v: zeros(params) }
    }

    /// One bias-corrected update. `grads` pairs parameter names with
    /// gradients; parameters without an entry see a zero gradient. A
    /// non-finite gradient aborts the step before anything is modified.
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                bail!(NonFinite, "gradient of {name}");
            }
            let p = params.get(name).ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            p.expect_same_shape(g)?;
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let c1 = T::lit(1.0 - ADAM_BETA1.powi(t));
        let c2 = T::lit(1.0 - ADAM_BETA2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPS));
        let lookup: std::collections::HashMap<&str, &Tensor<T>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        for (name, p) in params.iter_mut() {
            let m = self.m.get_mut(name).expect("moments mirror params");
            let v = self.v.get_mut(name).expect("moments mirror params");
            let g = lookup.get(name);
            for i in 0..p.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p.data_mut()[i] = p.data()[i] - update;
            }
        }
        Ok(())
    }
}

/// Piecewise-constant step decay.
#[derive(Clone, Debug, PartialEq)]
pub struct LrPlan {
    pub base: f64,
    pub factor: f64,
    /// Epochs (within the stage) at which the rate is multiplied by `factor`.
    pub milestones: Vec<usize>,
    pub floor: f64,
}

impl Default for LrPlan {
    fn default() -> Self {
        LrPlan { base: 1e-3, factor: 0.1, milestones: vec![5, 10], floor: 1e-5 }
    }
}

impl LrPlan {
    pub fn constant(lr: f64) -> Self {
        LrPlan { base: lr, factor: 1.0, milestones: Vec::new(), floor: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base >= 0.0 && self.base.is_finite() && self.factor > 0.0 && self.factor <= 1.0 && self.floor >= 0.0) {
            bail!(Config, "learning rate plan needs base >= 0, factor in (0, 1] and floor >= 0");
        }
        Ok(())
    }
}

/// Rate in effect during `epoch` (0-based within the stage). Never drops
/// below the floor, and never rises above the base rate.
pub fn lr_at_epoch(plan: &LrPlan, epoch: usize) -> f64 {
    let passed = plan.milestones.iter().filter(|&&m| m <= epoch).count();
    let lr = plan.base * plan.factor.powi(passed as i32);
    lr.max(plan.floor.min(plan.base))
}

/// Noise used to corrupt clean patches in a stage.
#[derive(Clone, Debug, PartialEq)]
pub enum StageNoise {
    /// i.i.d. Gaussian with a level drawn per patch.
    Gaussian(SigmaMode),
    Complex(ComplexKind),
}

impl StageNoise {
    /// `gaussian:50`, `set:30,50,70`, `range:30,70`, `stripe`, `deadline`,
    /// `impulse` or `mixture`.
    pub fn parse(s: &str) -> Result<Self> {
        let nums = |v: &str| -> Result<Vec<f64>> {
            v.split(',').map(|p| p.trim().parse().map_err(|_| Error::Config(format!("bad number {p:?} in {s:?}")))).collect()
        };
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        Ok(match kind.trim() {
            "gaussian" => StageNoise::Gaussian(SigmaMode::Set(nums(arg)?)),
            "set" => StageNoise::Gaussian(SigmaMode::Set(nums(arg)?)),
            "range" => match nums(arg)?[..] {
                [lo, hi] => StageNoise::Gaussian(SigmaMode::Range(lo, hi)),
                _ => bail!(Config, "range needs two bounds: {s:?}"),
            },
            "stripe" => StageNoise::Complex(ComplexKind::Stripe),
            "deadline" => StageNoise::Complex(ComplexKind::Deadline),
            "impulse" => StageNoise::Complex(ComplexKind::Impulse),
            "mixture" => StageNoise::Complex(ComplexKind::Mixture),
            other => bail!(Config, "unknown stage noise {other:?}"),
        })
    }

    pub fn corrupt(&self, clean: &HsiCube, rng: &mut impl Rng) -> Result<HsiCube> {
        match self {
            StageNoise::Gaussian(mode) => {
                let sigma = sample_sigma(mode, rng)?;
                add_gaussian_with(clean, sigma, rng)
            }
            StageNoise::Complex(k) => add_complex_with(clean, *k, &ComplexNoiseParams::default(), rng),
        }
    }
}

impl std::fmt::Display for StageNoise {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        match self {
            StageNoise::Gaussian(SigmaMode::Set(v)) if v.len() == 1 => write!(f, "gaussian:{}", v[0]),
            StageNoise::Gaussian(SigmaMode::Set(v)) => write!(f, "set:{}", join(v)),
            StageNoise::Gaussian(SigmaMode::Range(a, b)) => write!(f, "range:{a},{b}"),
            StageNoise::Complex(ComplexKind::Stripe) => f.write_str("stripe"),
            StageNoise::Complex(ComplexKind::Deadline) => f.write_str("deadline"),
            StageNoise::Complex(ComplexKind::Impulse) => f.write_str("impulse"),
            StageNoise::Complex(ComplexKind::Mixture) => f.write_str("mixture"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub epochs: usize,
    pub noise: StageNoise,
    pub lr: LrPlan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub seed: u64,
    /// Spatial size of training crops.
    pub patch: usize,
    /// Crop stride on the source cubes.
    pub stride: usize,
    /// Random rotation, flip and scale per batch.
    pub augment: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Three stages: fixed level 50, random levels from the training set,
    /// then mixed complex noise, each with the given epoch count.
    pub fn three_stage(epochs: [usize; 3]) -> Self {
        let stage = |epochs, noise| Stage { epochs, noise, lr: LrPlan::default() };
        TrainConfig {
            stages: vec![
                stage(epochs[0], StageNoise::Gaussian(SigmaMode::Set(vec![50.0]))),
                stage(epochs[1], StageNoise::Gaussian(SigmaMode::train_set())),
                stage(epochs[2], StageNoise::Complex(ComplexKind::Mixture)),
            ],
            batch_size: 16,
            seed: 0,
            patch: 64,
            stride: 32,
            augment: true,
            grad_clip: None,
        }
    }

    /// Short three-stage schedule on 32x32 patches that trains the tiny
    /// network on a few dozen cubes in minutes on one core.
    pub fn desk_scale() -> Self {
        let mut cfg = TrainConfig::three_stage([8, 3, 1]);
        cfg.patch = 32;
        cfg.stride = 16;
        cfg.batch_size = 4;
        cfg.stages[0].lr = LrPlan { milestones: vec![6], ..LrPlan::default() };
        cfg.stages[1].lr = LrPlan::constant(1e-4);
        cfg.stages[2].lr = LrPlan::constant(1e-4);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patch == 0 || self.stride == 0 {
            bail!(Config, "batch size, patch and stride must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                bail!(Config, "gradient clip must be positive");
            }
        }
        self.stages.iter().try_for_each(|s| s.lr.validate())
    }

    pub fn to_kv(&self) -> KvText {
        let mut kv = KvText::new();
        kv.set("seed", self.seed);
        kv.set("batch_size", self.batch_size);
        kv.set("patch", self.patch);
        kv.set("stride", self.stride);
        kv.set("augment", self.augment);
        if let Some(c) = self.grad_clip {
            kv.set("grad_clip", c);
        }
        kv.set("stages", self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            kv.set(&format!("stage{i}.epochs"), s.epochs);
            kv.set(&format!("stage{i}.noise"), &s.noise);
            kv.set(&format!("stage{i}.lr"), s.lr.base);
            kv.set(&format!("stage{i}.lr_factor"), s.lr.factor);
            kv.set_list(&format!("stage{i}.milestones"), &s.lr.milestones);
            kv.set(&format!("stage{i}.lr_floor"), s.lr.floor);
        }
        kv
    }

    /// Missing keys fall back to the defaults of
    /// [`three_stage`](Self::three_stage) with 20/40/30 epochs.
    pub fn from_kv(kv: &KvText) -> Result<Self> {
        let mut cfg = TrainConfig::three_stage([20, 40, 30]);
        let n: usize = kv.get_or("stages", cfg.stages.len())?;
        let mut known: Vec<String> =
            ["seed", "batch_size", "patch", "stride", "augment", "grad_clip", "stages"].map(String::from).to_vec();
        cfg.seed = kv.get_or("seed", cfg.seed)?;
        cfg.batch_size = kv.get_or("batch_size", cfg.batch_size)?;
        cfg.patch = kv.get_or("patch", cfg.patch)?;
        cfg.stride = kv.get_or("stride", cfg.stride)?;
        cfg.augment = kv.get_or("augment", cfg.augment)?;
        cfg.grad_clip = kv.get("grad_clip")?;
        let mut stages = Vec::with_capacity(n);
        for i in 0..n {
            let key = |k: &str| format!("stage{i}.{k}");
            for k in ["epochs", "noise", "lr", "lr_factor", "milestones", "lr_floor"] {
                known.push(key(k));
            }
            let default = cfg.stages.get(i).cloned().unwrap_or_else(|| cfg.stages.last().expect("three stages").clone());
            let noise = match kv.raw(&key("noise")) {
                Some(s) => StageNoise::parse(s)?,
                None => default.noise,
            };
            stages.push(Stage {
                epochs: kv.get_or(&key("epochs"), default.epochs)?,
                noise,
                lr: LrPlan {
                    base: kv.get_or(&key("lr"), default.lr.base)?,
                    factor: kv.get_or(&key("lr_factor"), default.lr.factor)?,
                    milestones: kv.get_list(&key("milestones"))?.unwrap_or(default.lr.milestones),
                    floor: kv.get_or(&key("lr_floor"), default.lr.floor)?,
                },
            });
        }
        cfg.stages = stages;
        let known: Vec<&str> = known.iter().map(String::as_str).collect();
        kv.reject_unknown(&known)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Clean training patches cropped from every cube.
pub fn prepare_patches(cubes: &[HsiCube], patch: usize, stride: usize) -> Result<Vec<HsiCube>> {
    let mut out = Vec::new();
    for c in cubes {
        out.extend(crop_patches(c, patch, stride)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Model, optimizer and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub man: Man<T>,
    pub config: TrainConfig,
    pub adam: Adam<T>,
    /// Next stage to run.
    pub stage: usize,
    /// Next epoch within `stage`.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step run by this instance.
    pub step_losses: Vec<f64>,
}

const STATE_STAGE: &str = "state.stage";
const STATE_EPOCH: &str = "state.epoch";
const STATE_STEP: &str = "state.adam_step";

impl<T: Real> Trainer<T> {
    pub fn new(man: Man<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&man.params);
        Ok(Trainer { man, config, adam, stage: 0, epoch: 0, history: Vec::new(), step_losses: Vec::new() })
    }

    pub fn finished(&self) -> bool {
        self.stage >= self.config.stages.len()
    }

    /// One optimizer step on a clean/noisy batch; returns the loss.
    pub fn step(&mut self, noisy: &Tensor<T>, clean: &Tensor<T>, lr: f64) -> Result<f64> {
        let (loss, mut grads) = loss_and_grads(&self.man, noisy, clean)?;
        if !loss.is_finite() {
            bail!(Diverged, "loss {loss} at optimizer step {}", self.adam.step + 1);
        }
        if let Some(clip) = self.config.grad_clip {
            clip_global_norm(&mut grads, clip);
        }
        self.adam.update(&mut self.man.params, &grads, lr)?;
        self.step_losses.push(loss);
        Ok(loss)
    }

    /// Runs the next epoch of the schedule on clean patches.
    pub fn run_epoch(&mut self, patches: &[HsiCube]) -> Result<EpochRecord> {
        if patches.is_empty() {
            bail!(Config, "training set is empty");
        }
        let Some(stage) = self.config.stages.get(self.stage).cloned() else {
            bail!(Config, "schedule already finished");
        };
        let lr = lr_at_epoch(&stage.lr, self.epoch);
        let mut rng = epoch_rng(self.config.seed, self.stage, self.epoch);
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let (noisy, clean) = self.assemble(patches, chunk, &stage.noise, &mut rng)?;
            let loss = self.step(&noisy, &clean, lr).map_err(|e| match e {
                Error::NonFinite(m) | Error::Diverged(m) => Error::Diverged(format!(
                    "stage {} epoch {} batch {batches}: {m}",
                    self.stage, self.epoch
                )),
                e => e,
            })?;
            total += loss;
            batches += 1;
        }
        let rec = EpochRecord { stage: self.stage, epoch: self.epoch, lr, mean_loss: total / batches as f64 };
        self.history.push(rec);
        self.epoch += 1;
        if self.epoch >= stage.epochs {
            self.stage += 1;
            self.epoch = 0;
        }
        Ok(rec)
    }

    fn assemble(
        &self,
        patches: &[HsiCube],
        idx: &[usize],
        noise: &StageNoise,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let scale = if self.config.augment { SCALE_FACTORS[rng.random_range(0..SCALE_FACTORS.len())] } else { 1.0 };
        let mut clean = Vec::with_capacity(idx.len());
        let mut noisy = Vec::with_capacity(idx.len());
        for &i in idx {
            let mut c = patches[i].clone();
            if self.config.augment {
                if c.height() == c.width() {
                    c = augment(&c, Augment::Rot90(rng.random_range(0..4u8)))?;
                }
                if rng.random_bool(0.5) {
                    c = augment(&c, Augment::FlipH)?;
                }
                c = augment(&c, Augment::Scale(scale))?;
            }
            noisy.push(noise.corrupt(&c, rng)?);
            clean.push(c);
        }
        Ok((stack(&noisy)?, stack(&clean)?))
    }

    /// Runs stages until the schedule ends or `max_epochs` more epochs ran,
    /// calling `after_epoch` after each.
    pub fn run(
        &mut self,
        patches: &[HsiCube],
        max_epochs: Option<usize>,
        mut after_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        let mut ran = 0;
        while !self.finished() && max_epochs.is_none_or(|m| ran < m) {
            if self.config.stages[self.stage].epochs == 0 {
                self.stage += 1;
                continue;
            }
            let rec = self.run_epoch(patches)?;
            after_epoch(self, &rec)?;
            ran += 1;
        }
        Ok(())
    }

    /// Weights, optimizer moments and schedule position.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: ModelParams<f32> = self.man.params.cast();
        for (prefix, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (name, t) in moments.iter() {
                tensors.insert(format!("{EXTRA_TENSOR_PREFIX}{prefix}.{name}"), t.cast()).expect("prefixed names unique");
            }
        }
        let mut meta = self.man.config.to_kv();
        meta.set(STATE_STAGE, self.stage);
        meta.set(STATE_EPOCH, self.epoch);
        meta.set(STATE_STEP, self.adam.step);
        for k in self.config.to_kv().keys() {
            meta.set(&format!("{EXTRA_KEY_PREFIX}train.{k}"), self.config.to_kv().raw(k).expect("listed"));
        }
        Checkpoint { tensors, meta }
    }

    /// Restores a trainer saved by [`to_checkpoint`](Self::to_checkpoint).
    /// Exact resumption requires `T = f32`, the checkpoint precision.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let man: Man<T> = model_from_checkpoint(ck)?;
        let mut train = KvText::new();
        let prefix = format!("{EXTRA_KEY_PREFIX}train.");
        for k in ck.meta.keys().filter(|k| k.starts_with(&prefix)) {
            train.set(&k[prefix.len()..], ck.meta.raw(k).expect("listed"));
        }
        let config = TrainConfig::from_kv(&train)?;
        let mut adam = Adam::new(&man.params);
        adam.step = ck.meta.require(STATE_STEP)?;
        for (prefix, moments) in [("m", &mut adam.m), ("v", &mut adam.v)] {
            for (name, t) in moments.iter_mut() {
                let key = format!("{EXTRA_TENSOR_PREFIX}{prefix}.{name}");
                let saved = ck.tensors.get(&key).ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")))?;
                saved.cast::<T>().expect_same_shape(t)?;
                *t = saved.cast();
            }
        }
        Ok(Trainer {
            man,
            config,
            adam,
            stage: ck.meta.require(STATE_STAGE)?,
            epoch: ck.meta.require(STATE_EPOCH)?,
            history: Vec::new(),
            step_losses: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

/// Runs one stage of `trainer`'s schedule to completion and returns the
/// epoch records it produced.
pub fn train_stage<T: Real>(trainer: &mut Trainer<T>, patches: &[HsiCube], stage: usize) -> Result<Vec<EpochRecord>> {
    if stage >= trainer.config.stages.len() {
        bail!(Config, "stage {stage} out of range");
    }
    trainer.stage = stage;
    trainer.epoch = 0;
    let start = trainer.history.len();
    for _ in 0..trainer.config.stages[stage].epochs {
        trainer.run_epoch(patches)?;
    }
    Ok(trainer.history[start..].to_vec())
}

fn epoch_rng(seed: u64, stage: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 32) | epoch as u64);
    rng
}

/// Loss and per-parameter gradients of the MSE between the network output
/// on `noisy` and `clean`.
pub fn loss_and_grads<T: Real>(man: &Man<T>, noisy: &Tensor<T>, clean: &Tensor<T>) -> Result<(f64, Vec<(String, Tensor<T>)>)> {
    let mut tape = Tape::new();
    let vars = man.params.bind(&mut tape, true);
    let x = tape.constant(noisy.clone());
    let y = tape.constant(clean.clone());
    let out = man_forward(&mut tape, x, &vars, &man.config)?;
    let loss = mse_loss(&mut tape, out.output, y)?;
    let value = tape.value(loss).item()?.as_f64();
    let mut g = tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|(name, v)| {
            let t = g.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()));
            (name.to_string(), t)
        })
        .collect();
    Ok((value, grads))
}

fn clip_global_norm<T: Real>(grads: &mut [(String, Tensor<T>)], max_norm: f64) {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
}

pub const LOSS_CSV_HEADER: &str = "stage,epoch,lr,mean_loss";

pub fn loss_history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in history {
        writeln!(s, "{},{},{:e},{:e}", r.stage, r.epoch, r.lr, r.mean_loss).expect("write to string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsidata::synth_dataset;
    use crate::network::build_variant;

    fn tiny(seed: u64, bands: usize) -> Man<f32> {
        build_variant("tiny", bands, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn small_config(epochs: [usize; 3]) -> TrainConfig {
        let mut cfg = TrainConfig::three_stage(epochs);
        cfg.batch_size = 2;
        cfg.patch = 8;
        cfg.stride = 8;
        cfg
    }

    #[test]
    fn lr_plan() {
        let p = LrPlan::default();
        assert_eq!(lr_at_epoch(&p, 0), 1e-3);
        assert_eq!(lr_at_epoch(&p, 4), 1e-3);
        assert!((lr_at_epoch(&p, 5) - 1e-4).abs() < 1e-18);
        assert!((lr_at_epoch(&p, 10) - 1e-5).abs() < 1e-18);
        let deep = LrPlan { milestones: vec![1, 2, 3, 4], ..p.clone() };
        assert_eq!(lr_at_epoch(&deep, 9), 1e-5);
        let flat = LrPlan { milestones: vec![], ..p };
        assert_eq!(lr_at_epoch(&flat, 100), 1e-3);
        assert_eq!(lr_at_epoch(&LrPlan::constant(0.0), 3), 0.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_sign() {
        let mut params = ModelParams::<f64>::new();
        params.insert("w", Tensor::new([3], vec![1.0, 2.0, -1.0]).unwrap()).unwrap();
        let before = params.clone();
        let mut adam = Adam::new(&params);
        let g = Tensor::new([3], vec![0.5, -3.0, 1e-3]).unwrap();
        adam.update(&mut params, &[("w".into(), g.clone())], 0.01).unwrap();
        for i in 0..3 {
            let moved = params.get("w").unwrap().data()[i] - before.get("w").unwrap().data()[i];
            // m_hat / sqrt(v_hat) = g / |g| after bias correction
            let gi = g.data()[i];
            let want = -0.01 * gi / (gi.abs() + ADAM_EPS);
            assert!((moved - want).abs() < 1e-15, "{moved} {want}");
        }
    }

    #[test]
    fn adam_zero_gradient_and_non_finite() {
        let mut params = ModelParams::<f64>::new();
        params.insert("w", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
        let before = params.clone();
        let mut adam = Adam::new(&params);
        for _ in 0..10 {
            adam.update(&mut params, &[("w".into(), Tensor::zeros([2]))], 0.1).unwrap();
        }
        assert_eq!(params, before);
        let mut nan = Tensor::zeros([2]);
        nan.data_mut()[0] = f64::INFINITY;
        let step = adam.step;
        assert!(adam.update(&mut params, &[("w".into(), nan)], 0.1).is_err());
        assert_eq!(adam.step, step);
        assert_eq!(params, before);
    }

    #[test]
    fn config_round_trip_and_noise_parsing() {
        let mut cfg = TrainConfig::three_stage([2, 3, 1]);
        cfg.grad_clip = Some(1.0);
        cfg.stages[1].noise = StageNoise::Gaussian(SigmaMode::Range(30.0, 70.0));
        let back = TrainConfig::from_kv(&KvText::parse(&cfg.to_kv().to_string()).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(StageNoise::parse("range:1").is_err());
        assert!(StageNoise::parse("speckle").is_err());
        assert!(TrainConfig::from_kv(&KvText::parse("bogus = 1").unwrap()).is_err());
    }

    #[test]
    fn mse_gradient_formula() {
        let mut t = Tape::<f64>::new();
        let p = t.leaf(Tensor::new([4], vec![1.0, 2.0, 0.5, -1.0]).unwrap(), true);
        let q = t.constant(Tensor::new([4], vec![0.0, 2.5, 0.5, 1.0]).unwrap());
        let l = mse_loss(&mut t, p, q).unwrap();
        assert!((t.value(l).item().unwrap() - (1.0 + 0.25 + 0.0 + 4.0) / 4.0).abs() < 1e-15);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.5, -0.25, 0.0, -1.0]);
    }

    #[test]
    fn zero_lr_stage_leaves_weights_untouched() {
        let data = prepare_patches(&synth_dataset(2, 3, 8, 8, 1).unwrap(), 8, 8).unwrap();
        let mut cfg = small_config([1, 0, 0]);
        cfg.stages[0].lr = LrPlan::constant(0.0);
        let man = tiny(1, 3);
        let mut tr = Trainer::new(man.clone(), cfg).unwrap();
        tr.run(&data, None, |_, _| Ok(())).unwrap();
        assert!(tr.finished());
        assert_eq!(tr.man.params, man.params);
    }

    #[test]
    fn resume_from_checkpoint_is_bitwise_identical() {
        let data = prepare_patches(&synth_dataset(3, 3, 8, 8, 2).unwrap(), 8, 8).unwrap();
        let cfg = small_config([1, 1, 1]);
        let mut straight = Trainer::new(tiny(4, 3), cfg.clone()).unwrap();
        straight.run(&data, None, |_, _| Ok(())).unwrap();

        let mut first = Trainer::new(tiny(4, 3), cfg).unwrap();
        first.run(&data, Some(2), |_, _| Ok(())).unwrap();
        let bytes = first.to_checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!((resumed.stage, resumed.epoch), (2, 0));
        resumed.run(&data, None, |_, _| Ok(())).unwrap();
        assert_eq!(resumed.man.params, straight.man.params);
        assert_eq!(resumed.adam, straight.adam);
    }

    #[test]
    fn every_tensor_receives_gradient_after_one_step() {
        let clean = synth_dataset(1, 4, 8, 8, 5).unwrap();
        let noisy = crate::noise::add_gaussian(&clean[0], 50.0, 1).unwrap();
        let (x, y) = (stack::<f32>(&[noisy]).unwrap(), stack(&clean).unwrap());
        let mut tr = Trainer::new(tiny(6, 4), small_config([1, 0, 0])).unwrap();
        // the skip gates start at zero, which blocks the fuse path until they move
        tr.step(&x, &y, 1e-3).unwrap();
        let (_, grads) = loss_and_grads(&tr.man, &x, &y).unwrap();
        let dead: Vec<_> = grads.iter().filter(|(_, g)| g.data().iter().all(|&v| v == 0.0)).map(|(n, _)| n).collect();
        assert!(dead.is_empty(), "{dead:?}");
    }

    #[test]
    fn loss_csv() {
        let h = [EpochRecord { stage: 0, epoch: 1, lr: 1e-3, mean_loss: 0.5 }];
        assert_eq!(loss_history_csv(&h), "stage,epoch,lr,mean_loss\n0,1,1e-3,5e-1\n");
    }
}
