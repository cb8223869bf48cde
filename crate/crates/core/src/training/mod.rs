//! Optimizer, schedule, length-bucketed batching and the training loop.

mod optim;

pub use optim::{adam_step, clip_grad_norm, global_norm, lr_at, AdamConfig, AdamState};

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{compute_losses, LossBreakdown, LossLog, LossWeights};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Batch, ModelConfig, MtpVariant, S2utModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            peak_lr: 3e-3,
            warmup_steps: 200,
            adam: AdamConfig::default(),
            grad_clip_norm: 1.0,
            seed: 1,
            log_every: 10,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.steps > self.warmup_steps && self.warmup_steps > 0) {
            return Err(Error::config("need steps > warmup_steps > 0"));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config("batch_size and log_every must be positive"));
        }
        if !(self.grad_clip_norm > 0.0) || !(self.peak_lr > 0.0) {
            return Err(Error::config("grad_clip_norm and peak_lr must be positive"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// Everything that determines a training run besides data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.weights.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn variant(&self) -> MtpVariant {
        self.model.mtp_variant
    }
}

/// Batches of one epoch: shuffle, sort pools of `8 × batch_size` by length,
/// cut into full batches, then shuffle batch order. A pure function of
/// `(seed, epoch)` so resumed runs see the same sequence.
pub fn epoch_batches(samples: &[Sample], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let key = |&i: &usize| (samples[i].units.len(), samples[i].src_feats.len());
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * 8) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(key);
        batches.extend(pool.chunks_exact(batch_size).map(<[usize]>::to_vec));
    }
    if batches.is_empty() && !samples.is_empty() {
        let mut all = order;
        all.sort_by_key(key);
        batches.push(all);
    }
    batches.shuffle(&mut rng);
    batches
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub breakdown: LossBreakdown,
    /// The update was skipped because the loss or gradient was non-finite.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: RunConfig,
    model: S2utModel,
    adam: AdamState,
    step: usize,
    bad_streak: usize,
    plan: Option<(u64, Vec<Vec<usize>>)>,
}

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const META_STEP: &str = "meta/step";
const META_ADAM_T: &str = "meta/adam_t";
const META_BAD: &str = "meta/bad_streak";

impl Trainer {
    /// Fresh model initialized from the training seed.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = S2utModel::new(cfg.model.clone(), cfg.train.seed)?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            cfg,
            model,
            adam,
            step: 0,
            bad_streak: 0,
            plan: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &S2utModel {
        &self.model
    }

    pub fn into_model(self) -> S2utModel {
        self.model
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    fn batch_for(&mut self, step: usize, data: &[Sample]) -> Result<Vec<usize>> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let tc = &self.cfg.train;
        let mut epoch = 0u64;
        let mut offset = step;
        loop {
            if self.plan.as_ref().is_none_or(|(e, _)| *e != epoch) {
                self.plan = Some((epoch, epoch_batches(data, tc.batch_size, tc.seed, epoch)));
            }
            let batches = &self.plan.as_ref().expect("just set").1;
            if offset < batches.len() {
                return Ok(batches[offset].clone());
            }
            offset -= batches.len();
            epoch += 1;
        }
    }

    /// Forward, backward, clip and update on the batch scheduled for the next step.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<StepReport> {
        let step = self.step + 1;
        let idx = self.batch_for(self.step, data)?;
        let samples: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = Batch::from_samples(&samples)?;
        let (breakdown, mut grads) = {
            let mut g = Graph::with_params(self.model.params());
            let (vars, breakdown) = compute_losses(&mut g, &self.model, &batch, &self.cfg.weights)?;
            let grads: Vec<Vec<f64>> = if breakdown.total.is_finite() {
                g.backward(vars.total)?;
                self.model
                    .params()
                    .ids()
                    .map(|id| {
                        g.param_grad(id)
                            .map_or_else(|| vec![0.0; self.model.params().tensor(id).numel()], <[f64]>::to_vec)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            (breakdown, grads)
        };
        let tc = &self.cfg.train;
        let lr = lr_at(step, tc.peak_lr, tc.warmup_steps);
        let mut grad_norm = f64::NAN;
        let mut skipped = !breakdown.total.is_finite();
        if !skipped {
            grad_norm = clip_grad_norm(&mut grads, tc.grad_clip_norm);
            match adam_step(self.model.params_mut(), &grads, &mut self.adam, lr, &tc.adam, step) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient { step }) => {
                    log::warn!("non-finite gradient at step {step}; update skipped");
                    skipped = true;
                }
                Err(e) => return Err(e),
            }
        }
        if skipped {
            self.bad_streak += 1;
            if self.bad_streak >= 2 {
                return Err(Error::Diverged {
                    step,
                    msg: format!(
                        "non-finite loss or gradient twice in a row (total = {})",
                        breakdown.total
                    ),
                });
            }
        } else {
            self.bad_streak = 0;
        }
        if breakdown.ctc_skipped > 0 {
            log::warn!(
                "step {step}: {} samples had infeasible CTC alignments",
                breakdown.ctc_skipped
            );
        }
        self.step = step;
        Ok(StepReport {
            step,
            lr,
            grad_norm,
            breakdown,
            skipped,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let store = self.model.params();
        let mut entries = self.model.param_entries();
        for (prefix, moments) in [(ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            for (id, values) in store.ids().zip(moments) {
                let shape = store.tensor(id).shape().to_vec();
                entries.push((
                    format!("{prefix}{}", store.name(id)),
                    Tensor::new(shape, values.clone()).expect("moments match parameter shapes"),
                ));
            }
        }
        entries.push((META_STEP.into(), Tensor::scalar(self.step as f64)));
        entries.push((META_ADAM_T.into(), Tensor::scalar(self.adam.t as f64)));
        entries.push((META_BAD.into(), Tensor::scalar(self.bad_streak as f64)));
        Checkpoint {
            config: self.cfg.to_toml(),
            entries,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::from_toml(&ck.config)?;
        let model = S2utModel::from_entries(cfg.model.clone(), ck)?;
        let meta = |name: &str| -> Result<usize> {
            ck.get(name)
                .map(|t| t.data()[0] as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))
        };
        let store = model.params();
        let mut adam = AdamState::new(store);
        for (prefix, moments) in [(ADAM_M, &mut adam.m), (ADAM_V, &mut adam.v)] {
            for (id, slot) in store.ids().zip(moments.iter_mut()) {
                let name = format!("{prefix}{}", store.name(id));
                let t = ck
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer entry {name}")))?;
                if t.shape() != store.tensor(id).shape() {
                    return Err(Error::Checkpoint(format!("optimizer entry {name} has the wrong shape")));
                }
                *slot = t.data().to_vec();
            }
        }
        adam.t = meta(META_ADAM_T)? as u64;
        Ok(Self {
            step: meta(META_STEP)?,
            bad_streak: meta(META_BAD)?,
            cfg,
            model,
            adam,
            plan: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Files written by [`run_training`] inside its output directory.
pub const TRAIN_LOG: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step_{step:06}.ckpt"))
}

/// Trains until `cfg.train.steps`, logging a loss row every `log_every` steps
/// and checkpointing every `checkpoint_every` steps. A trainer restored from a
/// checkpoint continues its log.
pub fn run_training(trainer: &mut Trainer, data: &[Sample], out: &Path) -> Result<()> {
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    let log_path = out.join(TRAIN_LOG);
    let n_terms = match trainer.cfg.variant() {
        MtpVariant::None => 0,
        _ => trainer.cfg.model.mtp_n,
    };
    let resuming = trainer.step > 0 && log_path.exists();
    let file = if resuming {
        truncate_log(&log_path, trainer.step)?;
        OpenOptions::new().append(true).open(&log_path)?
    } else {
        fs::File::create(&log_path)?
    };
    let mut log = if resuming {
        LossLog::without_header(file, n_terms)
    } else {
        LossLog::new(file, n_terms)?
    };
    let (total, log_every, ck_every) = (
        trainer.cfg.train.steps,
        trainer.cfg.train.log_every,
        trainer.cfg.train.checkpoint_every,
    );
    while trainer.step < total {
        let r = trainer.train_step(data)?;
        if r.step % log_every == 0 || r.step == total {
            log.append(r.step, &r.breakdown)?;
            log.flush()?;
            log::info!(
                "step {} lr {:.3e} |g| {:.3} total {:.4}",
                r.step,
                r.lr,
                r.grad_norm,
                r.breakdown.total
            );
        }
        if ck_every > 0 && r.step % ck_every == 0 {
            trainer.save(&checkpoint_path(out, r.step))?;
        }
    }
    log.flush()?;
    trainer.save(&out.join(FINAL_CHECKPOINT))
}

/// Drops log rows beyond `step` so a resumed run does not duplicate them.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let row_step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
        if i == 0 || row_step.is_some_and(|s| s <= step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

#[cfg(test)]
mod tests;
