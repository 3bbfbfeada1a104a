//! The optimization loop.
//!
//! Every random choice is keyed on the run seed and a counter (epoch for
//! the sample order, global sample position for modality and dropout
//! coins, optimizer step and position for the diffusion draws), so a run is
//! a pure function of its seed, configs and dataset, and resuming from a
//! checkpoint replays the remaining steps exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::codec::{CodecConfig, LatentTensor};
use crate::conditioning::Modality;
use crate::dit::{DiT, ModelConfig};
use crate::objectives::{self, DrawKey, LossConfig, NoiseSchedule, Objective, TrainSample, DEFAULT_MIN_SNR_LAMBDA};
use crate::optim::{self, AdamW, AdamWConfig};
use crate::raster::LabelRaster;
use crate::rng::{self, Stream};
use crate::toydata::{self, Dataset, NULL_TOKEN};
use crate::{Error, Result, Scalar};

pub const LOSS_LOG: &str = "loss.csv";
pub const NAN_DUMP: &str = "nan_dump.toml";
pub const RUN_CONFIG: &str = "run_config.toml";

/// Caption used for dropped or unconditional samples.
pub const NULL_CAPTION: &[u32] = &[NULL_TOKEN];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    /// Optimizer steps; 0 derives the count from `epochs`.
    pub max_steps: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    pub ema_decay: f64,
    pub cond_dropout: f64,
    /// Probability that a sample is conditioned on its sketch instead of its mask.
    pub sketch_fraction: f64,
    pub min_snr_lambda: f64,
    pub checkpoint_every: usize,
    pub keep_last: usize,
    /// Trailing window of the smoothed loss.
    pub smoothing_window: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// First-stage regimen of the full-scale model.
    pub fn paper_profile() -> Self {
        TrainConfig {
            objective: Objective::Ddpm,
            epochs: 300,
            max_steps: 0,
            batch_size: 32,
            accum_steps: 1,
            base_lr: 1e-4,
            warmup_steps: 200,
            betas: [0.9, 0.999],
            weight_decay: 0.01,
            adam_eps: 1e-8,
            max_grad_norm: 0.5,
            ema_decay: 0.9999,
            cond_dropout: 0.05,
            sketch_fraction: 0.5,
            min_snr_lambda: DEFAULT_MIN_SNR_LAMBDA,
            checkpoint_every: 500,
            keep_last: 3,
            smoothing_window: 100,
            seed: 0,
        }
    }

    /// Desk-scale run: 2000 steps of batch 32.
    pub fn toy() -> Self {
        TrainConfig {
            max_steps: 2000,
            base_lr: 1e-3,
            warmup_steps: 100,
            ema_decay: 0.999,
            ..Self::paper_profile()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.accum_steps == 0 {
            return fail("batch_size and accum_steps must be positive".into());
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return fail("set epochs or max_steps".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return fail(format!("Adam betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.adam_eps > 0.0) || !(self.max_grad_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("adam_eps and max_grad_norm must be positive, weight_decay non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return fail(format!("cond_dropout must lie in [0, 1), got {}", self.cond_dropout));
        }
        if !(0.0..=1.0).contains(&self.sketch_fraction) {
            return fail(format!("sketch_fraction must lie in [0, 1], got {}", self.sketch_fraction));
        }
        if !(self.min_snr_lambda > 0.0) {
            return fail(format!("min_snr_lambda must be positive, got {}", self.min_snr_lambda));
        }
        if self.checkpoint_every == 0 || self.keep_last == 0 || self.smoothing_window == 0 {
            return fail("checkpoint_every, keep_last and smoothing_window must be positive".into());
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accum_steps
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            (self.epochs * n_train).div_ceil(self.effective_batch()).max(1)
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            objective: self.objective,
            schedule: NoiseSchedule::default(),
            min_snr_lambda: self.min_snr_lambda,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Encoded condition image of a mask or sketch.
pub fn condition_latent<T: Scalar>(codec: &CodecConfig, modality: Modality, mask: &LabelRaster, sketch: &LabelRaster) -> Result<LatentTensor<T>> {
    let rgb = match modality {
        Modality::Mask => toydata::mask_to_rgb(mask),
        Modality::Sketch => toydata::sketch_to_rgb(sketch),
    };
    codec.encode(&rgb.to_planar::<T>())
}

/// Encoded training split held in memory.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    pub latents: Vec<LatentTensor<T>>,
    /// Condition latents indexed by modality.
    pub conditions: [Vec<LatentTensor<T>>; 2],
    pub captions: Vec<Vec<u32>>,
    pub zero: LatentTensor<T>,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_dataset(ds: &Dataset, range: std::ops::Range<usize>, codec: &CodecConfig) -> Result<Self> {
        if range.is_empty() {
            return Err(Error::Input("training split is empty".into()));
        }
        let mut d = TrainData {
            latents: Vec::with_capacity(range.len()),
            conditions: [Vec::with_capacity(range.len()), Vec::with_capacity(range.len())],
            captions: Vec::with_capacity(range.len()),
            zero: LatentTensor::zeros(0, 0, 0),
        };
        for i in range {
            let s = ds.load(i)?;
            d.latents.push(codec.encode(&s.image.to_planar::<T>())?);
            for m in [Modality::Mask, Modality::Sketch] {
                d.conditions[m.index()].push(condition_latent(codec, m, &s.mask, &s.sketch)?);
            }
            d.captions.push(s.record.caption_tokens.clone());
        }
        let (c, h, w) = d.latents[0].shape();
        d.zero = LatentTensor::zeros(c, h, w);
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Per-sample dropout decisions for the caption and the spatial condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropDecision {
    pub caption: bool,
    pub condition: bool,
}

/// Two independent coins with probability `p`, keyed on the sample's global position.
pub fn drop_decision(p: f64, seed: u64, position: u64) -> DropDecision {
    let mut r = rng::keyed(seed, Stream::Dropout, position, 0);
    let caption = r.random::<f64>() < p;
    let condition = r.random::<f64>() < p;
    DropDecision { caption, condition }
}

/// Replaces captions by the null caption and conditions by `zero`,
/// independently per sample with probability `p`.
pub fn apply_cond_dropout<'a, T: Scalar>(
    batch: &[TrainSample<'a, T>],
    p: f64,
    seed: u64,
    first_position: u64,
    zero: &'a LatentTensor<T>,
) -> Vec<TrainSample<'a, T>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let d = drop_decision(p, seed, first_position + i as u64);
            TrainSample {
                caption: if d.caption { NULL_CAPTION } else { s.caption },
                z_c: if d.condition { zero } else { s.z_c },
                ..*s
            }
        })
        .collect()
}

/// Mean loss and gradient over micro-batches, each weighted `1/k`.
pub fn accumulated_gradient<T: Scalar>(
    model: &DiT,
    loss: &LossConfig,
    params: &[T],
    micro: &[(Vec<TrainSample<'_, T>>, DrawKey)],
) -> Result<(f64, Vec<T>)> {
    let k = micro.len() as f64;
    let mut total = vec![T::zero(); params.len()];
    let mut mean = 0.0;
    for (batch, key) in micro {
        let (report, g) = objectives::loss_and_grad(loss, model, params, batch, *key, 1.0 / k)?;
        mean += report.loss / k;
        for (a, b) in total.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    Ok((mean, total))
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Training state of one run.
pub struct Trainer {
    pub model: DiT,
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub codec: CodecConfig,
    pub data: TrainData<f32>,
    pub params: Vec<f32>,
    pub ema: Vec<f32>,
    pub opt: AdamW<f32>,
    pub step: u64,
    pub history: Vec<f64>,
    decay: Vec<bool>,
    loss: LossConfig,
    perms: BTreeMap<u64, Vec<usize>>,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, codec: CodecConfig, data: TrainData<f32>) -> Result<Self> {
        cfg.validate()?;
        let model = DiT::new(model_cfg.clone())?;
        let params: Vec<f32> = model.init_params();
        let n = params.len();
        Ok(Trainer {
            decay: model.layout.decay_mask(),
            loss: cfg.loss_config(),
            ema: params.clone(),
            opt: AdamW::new(n),
            params,
            model,
            model_cfg,
            cfg,
            codec,
            data,
            step: 0,
            history: Vec::new(),
            perms: BTreeMap::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, data: TrainData<f32>) -> Result<Self> {
        let mut t = Trainer::new(ckpt.meta.model.clone(), ckpt.meta.train.clone(), ckpt.meta.codec, data)?;
        t.params = ckpt.params;
        t.ema = ckpt.ema;
        t.opt = ckpt.opt;
        t.step = ckpt.meta.step;
        Ok(t)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.total_steps(self.data.len())
    }

    fn index_at(&mut self, position: u64) -> usize {
        let n = self.data.len() as u64;
        let epoch = position / n;
        let seed = self.cfg.seed;
        let perm = self.perms.entry(epoch).or_insert_with(|| {
            let mut p: Vec<usize> = (0..n as usize).collect();
            p.shuffle(&mut rng::keyed(seed, Stream::Epoch, epoch, 0));
            p
        });
        let idx = perm[(position % n) as usize];
        if self.perms.len() > 2 {
            let oldest = *self.perms.keys().next().expect("nonempty");
            self.perms.remove(&oldest);
        }
        idx
    }

    fn modality_at(&self, position: u64) -> Modality {
        let mut r = rng::keyed(self.cfg.seed, Stream::Epoch, position, 1);
        if r.random::<f64>() < self.cfg.sketch_fraction {
            Modality::Sketch
        } else {
            Modality::Mask
        }
    }

    /// Dataset indices, modalities and the first global position of
    /// micro-batch `micro` of optimizer step `step` (0-based).
    pub fn plan_micro(&mut self, step: u64, micro: usize) -> (Vec<(usize, Modality)>, u64) {
        let b = self.cfg.batch_size as u64;
        let first = (step * self.cfg.accum_steps as u64 + micro as u64) * b;
        let items = (0..b)
            .map(|i| {
                let pos = first + i;
                (self.index_at(pos), self.modality_at(pos))
            })
            .collect();
        (items, first)
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let plans: Vec<_> = (0..self.cfg.accum_steps).map(|m| self.plan_micro(step, m)).collect();
        let data = &self.data;
        let micro: Vec<(Vec<TrainSample<'_, f32>>, DrawKey)> = plans
            .iter()
            .map(|(items, first)| {
                let batch: Vec<_> = items
                    .iter()
                    .map(|&(i, m)| TrainSample {
                        z0: &data.latents[i],
                        z_c: &data.conditions[m.index()][i],
                        caption: &data.captions[i],
                        modality: m,
                    })
                    .collect();
                let batch = apply_cond_dropout(&batch, self.cfg.cond_dropout, self.cfg.seed, *first, &data.zero);
                let key = DrawKey {
                    seed: self.cfg.seed,
                    step,
                    first_index: *first,
                };
                (batch, key)
            })
            .collect();
        let (loss, mut grads) = accumulated_gradient(&self.model, &self.loss, &self.params, &micro)?;
        let grad_norm = optim::clip_grad_norm(&mut grads, self.cfg.max_grad_norm);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss or gradient at step {} (loss {loss}, grad norm {grad_norm})",
                step + 1
            )));
        }
        let lr = optim::cosine_lr(step as usize + 1, self.cfg.warmup_steps, self.total_steps(), self.cfg.base_lr);
        self.opt.step(&self.cfg.adamw(), lr, &mut self.params, &grads, &self.decay)?;
        optim::ema_update(&mut self.ema, &self.params, self.cfg.ema_decay)?;
        self.step += 1;
        self.history.push(loss);
        Ok(StepRecord {
            step: self.step,
            lr,
            loss,
            grad_norm,
        })
    }

    /// Trailing mean of the last `smoothing_window` logged losses.
    pub fn smoothed_loss(&self) -> f64 {
        smoothed(&self.history, self.history.len(), self.cfg.smoothing_window)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                step: self.step,
                smoothed_loss: self.smoothed_loss(),
                model: self.model_cfg.clone(),
                codec: self.codec,
                train: self.cfg.clone(),
            },
            params: self.params.clone(),
            ema: self.ema.clone(),
            opt: self.opt.clone(),
        }
    }
}

/// Mean of `losses[end−window .. end]` (1-based step `end`), truncated at the start.
pub fn smoothed(losses: &[f64], end: usize, window: usize) -> f64 {
    let end = end.min(losses.len());
    let start = end.saturating_sub(window);
    if end == start {
        return f64::NAN;
    }
    losses[start..end].iter().sum::<f64>() / (end - start) as f64
}

/// Run-time options of [`train`].
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<PathBuf>,
    /// Stop (and checkpoint) after this step without changing the schedule.
    pub stop_at: Option<u64>,
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
}

/// Result of a run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
    pub final_dir: PathBuf,
}

#[derive(Serialize)]
struct RunConfigEcho<'a> {
    data: BTreeMap<&'a str, String>,
    model: &'a ModelConfig,
    codec: &'a CodecConfig,
    train: &'a TrainConfig,
}

#[derive(Serialize)]
struct NanDump {
    step: u64,
    seed: u64,
    first_position: u64,
    positions_per_step: u64,
    message: String,
}

fn read_loss_log(path: &Path, upto: u64) -> Result<Vec<f64>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let step: u64 = f.first().and_then(|s| s.parse().ok()).ok_or_else(|| Error::format(path, format!("bad row {line:?}")))?;
        if step <= upto {
            out.push(f.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| Error::format(path, format!("bad row {line:?}")))?);
        }
    }
    Ok(out)
}

fn prior_rows(path: &Path, upto: u64) -> Result<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(String::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= upto))
        .map(|l| format!("{l}\n"))
        .collect())
}

/// Trains on the training split of `dataset_dir`, writing checkpoints and
/// `loss.csv` into `out_dir`.
pub fn train(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    codec: &CodecConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    codec.validate()?;
    let ds = Dataset::open(dataset_dir)?;
    let data = TrainData::from_dataset(&ds, ds.train_range(), codec)?;
    let mut trainer = match &opts.resume {
        Some(dir) => {
            let ckpt = Checkpoint::load(dir)?;
            if ckpt.meta.model != *model_cfg || ckpt.meta.codec != *codec {
                return Err(Error::State(format!(
                    "checkpoint {} was trained with a different model or codec configuration",
                    dir.display()
                )));
            }
            if ckpt.meta.train.objective != train_cfg.objective {
                return Err(Error::Usage(format!(
                    "checkpoint objective is {}, run requests {}",
                    ckpt.meta.train.objective, train_cfg.objective
                )));
            }
            let mut ckpt = ckpt;
            ckpt.meta.train = train_cfg.clone();
            Trainer::from_checkpoint(ckpt, data)?
        }
        None => Trainer::new(model_cfg.clone(), train_cfg.clone(), *codec, data)?,
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let echo = RunConfigEcho {
        data: BTreeMap::from([("dir", dataset_dir.display().to_string())]),
        model: model_cfg,
        codec,
        train: train_cfg,
    };
    let echo_path = out_dir.join(RUN_CONFIG);
    fs::write(&echo_path, toml::to_string(&echo).map_err(|e| Error::State(e.to_string()))?).map_err(|e| Error::io(&echo_path, e))?;

    let log_path = out_dir.join(LOSS_LOG);
    let start = trainer.step;
    let prior = prior_rows(&log_path, start)?;
    trainer.history = read_loss_log(&log_path, start)?;
    if trainer.history.len() as u64 != start {
        // Log from a different run directory; smoothing restarts here.
        trainer.history = vec![f64::NAN; start as usize];
    }
    let total = trainer.total_steps() as u64;
    let stop = opts.stop_at.unwrap_or(total).min(total);
    let mut records = Vec::new();
    let mut on_step = opts.on_step;
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    write!(log, "step,lr,loss,grad_norm\n{prior}").map_err(|e| Error::io(&log_path, e))?;
    while trainer.step < stop {
        let rec = match trainer.train_step() {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                let dump = NanDump {
                    step: trainer.step + 1,
                    seed: trainer.cfg.seed,
                    first_position: trainer.step * trainer.cfg.effective_batch() as u64,
                    positions_per_step: trainer.cfg.effective_batch() as u64,
                    message: msg.clone(),
                };
                let p = out_dir.join(NAN_DUMP);
                fs::write(&p, toml::to_string(&dump).map_err(|e| Error::State(e.to_string()))?).map_err(|e| Error::io(&p, e))?;
                return Err(Error::Numeric(format!("{msg}; replay state written to {}", p.display())));
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{},{:e},{},{}", rec.step, rec.lr, rec.loss, rec.grad_norm).map_err(|e| Error::io(&log_path, e))?;
        if let Some(f) = on_step.as_mut() {
            f(&rec);
        }
        records.push(rec);
        if rec.step % trainer.cfg.checkpoint_every as u64 == 0 && rec.step < stop {
            trainer.checkpoint().save(&checkpoint::checkpoint_dir(out_dir, rec.step))?;
            checkpoint::prune_checkpoints(out_dir, trainer.cfg.keep_last)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ckpt = trainer.checkpoint();
    let final_dir = checkpoint::checkpoint_dir(out_dir, trainer.step);
    ckpt.save(&final_dir)?;
    checkpoint::prune_checkpoints(out_dir, trainer.cfg.keep_last)?;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        records,
        final_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configs_validate() {
        TrainConfig::paper_profile().validate().unwrap();
        TrainConfig::toy().validate().unwrap();
        let bad = TrainConfig {
            cond_dropout: 1.0,
            ..TrainConfig::toy()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::paper_profile().total_steps(100), 300 * 100 / 32 + 1);
    }

    #[test]
    fn dropout_extremes() {
        let z = LatentTensor::<f32>::zeros(1, 1, 1);
        let zero = LatentTensor::<f32>::zeros(1, 1, 1);
        let c = LatentTensor::<f32>::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let cap = [3u32, 7];
        let batch = vec![
            TrainSample {
                z0: &z,
                z_c: &c,
                caption: &cap,
                modality: Modality::Mask,
            };
            8
        ];
        let kept = apply_cond_dropout(&batch, 0.0, 1, 0, &zero);
        assert!(kept.iter().all(|s| s.caption == cap && s.z_c.data == [1.0]));
        let dropped = apply_cond_dropout(&batch, 1.0, 1, 0, &zero);
        assert!(dropped.iter().all(|s| s.caption == NULL_CAPTION && s.z_c.data == [0.0]));
    }

    #[test]
    fn smoothing_window() {
        let l = [4.0, 2.0, 3.0, 1.0];
        assert_eq!(smoothed(&l, 2, 100), 3.0);
        assert_eq!(smoothed(&l, 4, 2), 2.0);
    }
}
