//! Optimization loop, learning-rate schedule, checkpoints and
//! cross-validation.

mod checkpoint;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_model, Checkpoint, TrainState, SCKPT_MAGIC, SCKPT_VERSION};
pub use optim::{AdamW, AdamWConfig};

use crate::error::{Error, Result};
use crate::inference::{sliding_window_infer, EnsembleMember, EnsembleSpec, SlidingWindowPlan};
use crate::metrics::{dice_score, RegionValues, DICE_EPS};
use crate::model::{ModelConfig, SwinUnetr};
use crate::tensor::Tape;
use crate::volume::{augment, case_rng, random_crop, AugmentationConfig, CaseEntry, DatasetManifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    /// One epoch is one pass over the training cases, one crop each.
    pub epochs: usize,
    /// Overrides `epochs * cases` as the total step count when set.
    pub steps: Option<usize>,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub augment: AugmentationConfig,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    pub val_plan: SlidingWindowPlan,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 8e-4,
            epochs: 800,
            steps: None,
            warmup_fraction: 0.05,
            batch_size: 1,
            optimizer: AdamWConfig::default(),
            seed: 0,
            augment: AugmentationConfig::default(),
            val_every: 1,
            val_plan: SlidingWindowPlan::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for the synthetic dataset: 32^3 crops, 20 epochs, and a
    /// larger peak rate so short runs converge.
    pub fn toy() -> Self {
        TrainConfig {
            lr_max: 0.01,
            epochs: 20,
            augment: AugmentationConfig { crop_size: [32; 3], ..AugmentationConfig::default() },
            val_plan: SlidingWindowPlan { roi: [32; 3], overlap: 0.5, ..SlidingWindowPlan::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!("lr_max must be positive, got {}", self.lr_max)));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(format!("only batch_size 1 is supported, got {}", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if self.epochs == 0 && self.steps.is_none() || self.steps == Some(0) {
            return Err(Error::Config("training needs at least one step".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be >= 1".into()));
        }
        self.augment.validate()?;
        self.val_plan.validate()
    }

    pub fn total_steps(&self, cases: usize) -> usize {
        self.steps.unwrap_or(self.epochs * cases)
    }

    pub fn warmup_steps(&self, total: usize) -> usize {
        ((self.warmup_fraction * total as f64).round() as usize).min(total.saturating_sub(1))
    }
}

/// Linear warmup from zero to `lr_max` over `warmup` steps, then cosine
/// annealing to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, lr_max: f64) -> f64 {
    lr_at_time(step as f64, total as f64, warmup as f64, lr_max)
}

/// [`lr_at`] on a continuous step axis.
pub fn lr_at_time(t: f64, total: f64, warmup: f64, lr_max: f64) -> f64 {
    if t < warmup {
        return lr_max * t / warmup;
    }
    if t >= total {
        return 0.0;
    }
    let x = (t - warmup) / (total - warmup);
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// One line of the JSON-lines metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub mean_train_loss: f64,
    pub val_dice: Option<RegionValues<f64>>,
    pub lr: f64,
}

/// Per-region Dice of thresholded sliding-window predictions, averaged over
/// cases.
pub fn evaluate_dice(model: &SwinUnetr<f32>, manifest: &DatasetManifest, cases: &[&CaseEntry], plan: &SlidingWindowPlan) -> Result<RegionValues<f64>> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases to evaluate".into()));
    }
    let mut sum = [0.0; 3];
    for c in cases {
        let img = manifest.load_image(c)?;
        let gt = manifest.load_mask(c)?.channels()?;
        let p = sliding_window_infer(&img, model, plan).map_err(|e| e.context(format!("case {}", c.id)))?;
        let n = img.voxels();
        for (k, s) in sum.iter_mut().enumerate() {
            let pred: Vec<bool> = p.data()[k * n..(k + 1) * n].iter().map(|&v| v >= 0.5).collect();
            *s += dice_score(&pred, &gt[k])?;
        }
    }
    Ok(RegionValues::from_array(sum.map(|s| s / cases.len() as f64)))
}

fn mean3(v: &RegionValues<f64>) -> f64 {
    v.to_array().iter().sum::<f64>() / 3.0
}

/// Result of a completed (or paused) run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub last: PathBuf,
    pub best: PathBuf,
    pub log: PathBuf,
    pub best_val_dice: Option<f64>,
    pub history: Vec<EpochLog>,
}

pub struct Trainer {
    model: SwinUnetr<f32>,
    optimizer: AdamW,
    config: TrainConfig,
    manifest: DatasetManifest,
    train_cases: Vec<CaseEntry>,
    val_cases: Vec<CaseEntry>,
    state: TrainState,
    losses: Vec<f64>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, manifest: DatasetManifest, fold: Option<usize>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SwinUnetr::new(model_config, &mut rng)?;
        let optimizer = AdamW::new(config.optimizer, model.params());
        let state = TrainState { fold, ..TrainState::default() };
        Self::assemble(model, optimizer, config, manifest, state)
    }

    /// Continues from a checkpoint written by [`Trainer::run`].
    pub fn resume(ckpt: Checkpoint<f32>, manifest: DatasetManifest) -> Result<Self> {
        let config = ckpt.train.ok_or_else(|| Error::Config("checkpoint carries no training config".into()))?;
        let optimizer = ckpt.optimizer.ok_or_else(|| Error::Config("checkpoint carries no optimizer state".into()))?;
        Self::assemble(ckpt.model, optimizer, config, manifest, ckpt.state)
    }

    fn assemble(model: SwinUnetr<f32>, optimizer: AdamW, config: TrainConfig, manifest: DatasetManifest, mut state: TrainState) -> Result<Self> {
        let (train, val) = match state.fold {
            Some(f) => manifest.split(f)?,
            None => (manifest.cases.iter().collect(), Vec::new()),
        };
        if train.is_empty() {
            return Err(Error::Config("no training cases".into()));
        }
        if let Some(c) = train.iter().chain(&val).find(|c| c.mask.is_none()) {
            return Err(Error::Config(format!("case {} has no mask", c.id)));
        }
        let total = config.total_steps(train.len());
        if state.total_steps != 0 && state.total_steps != total {
            return Err(Error::Config(format!("checkpoint planned {} steps, config gives {total}", state.total_steps)));
        }
        state.total_steps = total;
        let (train_cases, val_cases) = (train.into_iter().cloned().collect(), val.into_iter().cloned().collect());
        Ok(Trainer { model, optimizer, config, manifest, train_cases, val_cases, state, losses: Vec::new() })
    }

    pub fn model(&self) -> &SwinUnetr<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn train_cases(&self) -> &[CaseEntry] {
        &self.train_cases
    }

    /// Losses of the steps taken by this process, in order.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        Checkpoint { model: self.model.clone(), train: Some(self.config.clone()), state: self.state.clone(), optimizer: Some(self.optimizer.clone()) }
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train_cases.len()).collect();
        order.shuffle(&mut case_rng(self.config.seed, epoch as u64, "\0epoch-order"));
        order
    }

    /// One optimizer step; returns the loss.
    pub fn step(&mut self) -> Result<f64> {
        let n = self.train_cases.len();
        let step = self.state.step;
        if step >= self.state.total_steps {
            return Err(Error::InvalidArgument(format!("run already finished at step {step}")));
        }
        let epoch = step / n;
        let case = &self.train_cases[self.epoch_order(epoch)[step % n]];
        let mut rng = case_rng(self.config.seed, epoch as u64, &case.id);
        let img = self.manifest.load_image(case)?;
        let mask = self.manifest.load_mask(case)?;
        let (img, mask) = random_crop(&img, &mask, self.config.augment.crop_size, &mut rng)?;
        let (img, mask) = augment(&img, &mask, &self.config.augment, &mut rng)?;

        let tape = Tape::<f32>::new();
        let x = tape.constant(img.to_tensor());
        let probs = self.model.forward(&x)?.sigmoid();
        let loss = probs.soft_dice_loss(&mask.to_target()?, DICE_EPS)?;
        let value = loss.value().item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} on case {}", case.id)));
        }
        tape.backward(&loss)?;
        let grads: Vec<_> = self.model.params().iter().map(|p| tape.take_param_grad(p.name())).collect();
        drop(loss);
        drop(probs);
        drop(x);
        let warmup = self.config.warmup_steps(self.state.total_steps);
        let lr = lr_at(step, self.state.total_steps, warmup, self.config.lr_max);
        self.optimizer
            .update(self.model.params_mut(), &grads, lr)
            .map_err(|e| e.context(format!("step {step}, case {}", case.id)))?;
        self.state.step += 1;
        self.state.epoch_loss_sum += value;
        self.losses.push(value);
        Ok(value)
    }

    /// Trains until `until` steps (or the end of the schedule), writing
    /// `last.sckpt`, `best.sckpt` and `metrics.jsonl` into `out_dir`.
    pub fn run(&mut self, out_dir: impl AsRef<Path>, until: Option<usize>) -> Result<TrainSummary> {
        let out_dir = out_dir.as_ref();
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let (last, best, log_path) = (out_dir.join("last.sckpt"), out_dir.join("best.sckpt"), out_dir.join("metrics.jsonl"));
        if self.state.step == 0 {
            fs::write(&log_path, "").map_err(|e| Error::io(&log_path, e))?;
        }
        let n = self.train_cases.len();
        let total = self.state.total_steps;
        let stop = until.unwrap_or(total).min(total);
        let epochs = total.div_ceil(n);
        let mut history = Vec::new();
        while self.state.step < stop {
            self.step()?;
            let step = self.state.step;
            let in_epoch = match step % n {
                0 => n,
                r => r,
            };
            if step % n != 0 && step != total {
                continue;
            }
            let epoch = (step - 1) / n;
            let validate = !self.val_cases.is_empty() && ((epoch + 1) % self.config.val_every == 0 || epoch + 1 == epochs);
            let val_dice = if validate {
                let cases: Vec<&CaseEntry> = self.val_cases.iter().collect();
                Some(evaluate_dice(&self.model, &self.manifest, &cases, &self.config.val_plan)?)
            } else {
                None
            };
            let warmup = self.config.warmup_steps(total);
            let entry = EpochLog {
                epoch,
                step,
                mean_train_loss: self.state.epoch_loss_sum / in_epoch as f64,
                val_dice,
                lr: lr_at(step - 1, total, warmup, self.config.lr_max),
            };
            log::info!("epoch {epoch} step {step}: loss {:.5} val {:?}", entry.mean_train_loss, entry.val_dice);
            self.state.epoch_loss_sum = 0.0;
            let improved = match (&entry.val_dice, self.state.best_val_dice) {
                (Some(v), Some(b)) => mean3(v) > b,
                (Some(_), None) => true,
                (None, _) => self.val_cases.is_empty(),
            };
            if improved {
                self.state.best_val_dice = entry.val_dice.as_ref().map(mean3);
                self.state.best_epoch = Some(epoch);
                self.checkpoint().save(&best)?;
            }
            let mut f = OpenOptions::new().append(true).create(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&log_path, e))?;
            history.push(entry);
        }
        self.checkpoint().save(&last)?;
        if !best.exists() {
            self.checkpoint().save(&best)?;
        }
        Ok(TrainSummary { steps: self.state.step, last, best, log: log_path, best_val_dice: self.state.best_val_dice, history })
    }
}

/// Trains every fold `runs` times (seed offset by run index) and collects
/// the best checkpoints into an ensemble description at
/// `out_dir/ensemble.json`.
pub fn run_cross_validation(manifest: &DatasetManifest, model_config: &ModelConfig, config: &TrainConfig, runs: usize, out_dir: impl AsRef<Path>) -> Result<EnsembleSpec> {
    let out_dir = out_dir.as_ref();
    let k = manifest.num_folds();
    if k == 0 || runs == 0 {
        return Err(Error::Config(format!("cross-validation needs folds and runs, got {k} folds and {runs} runs")));
    }
    let mut members = Vec::new();
    for run in 0..runs {
        let seed = config.seed + run as u64;
        for fold in 0..k {
            let ctx = format!("fold {fold}, seed {seed}");
            let cfg = TrainConfig { seed, ..config.clone() };
            let name = format!("run{run}_fold{fold}");
            let mut t = Trainer::new(model_config.clone(), cfg, manifest.clone(), Some(fold)).map_err(|e| e.context(&ctx))?;
            let s = t.run(out_dir.join(&name), None).map_err(|e| e.context(&ctx))?;
            members.push(EnsembleMember { checkpoint: Path::new(&name).join("best.sckpt"), fold, seed, best_val_dice: s.best_val_dice });
        }
    }
    let spec = EnsembleSpec::new(members);
    spec.save(out_dir.join("ensemble.json"))?;
    Ok(spec)
}
