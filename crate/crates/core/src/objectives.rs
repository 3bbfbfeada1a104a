//! Forward diffusion and the two training losses.
//!
//! DDPM: `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε` with ε-prediction and Min-SNR
//! weighting. Flow matching: `z_t = (1−t)·x0 + t·x1` with `x0` noise, `x1`
//! data and velocity target `x1 − x0`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentTensor;
use crate::conditioning::{Modality, TimeInput};
use crate::dit::{Denoiser, DiT, ModelInput, Prediction};
use crate::rng::{self, Stream};
use crate::{Error, Result, Scalar};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;
pub const DEFAULT_MIN_SNR_LAMBDA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ddpm,
    Rfm,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Ddpm => "ddpm",
            Objective::Rfm => "rfm",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Objective::Ddpm),
            "rfm" => Ok(Objective::Rfm),
            _ => Err(Error::Usage(format!("unknown objective {s:?} (expected ddpm or rfm)"))),
        }
    }
}

/// Tabulated discrete schedule; index `t` runs over `1..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas_bar: Vec<f64>,
    pub snr: Vec<f64>,
}

impl NoiseSchedule {
    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::Input(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alphas_bar[self.index(t)?])
    }

    pub fn snr_at(&self, t: usize) -> Result<f64> {
        Ok(self.snr[self.index(t)?])
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut acc = 1.0;
    let alphas_bar: Vec<f64> = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    let snr = alphas_bar.iter().map(|a| a / (1.0 - a)).collect();
    Ok(NoiseSchedule {
        steps,
        betas,
        alphas_bar,
        snr,
    })
}

fn check_same<T: Scalar>(a: &LatentTensor<T>, b: &LatentTensor<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Input(format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `√ᾱ·z0 + √(1−ᾱ)·ε` for an explicit `ᾱ ∈ [0, 1]`.
pub fn mix_noise<T: Scalar>(z0: &LatentTensor<T>, eps: &LatentTensor<T>, alpha_bar: f64) -> Result<LatentTensor<T>> {
    check_same(z0, eps)?;
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::Input(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    let (a, s) = (T::lit(alpha_bar.sqrt()), T::lit((1.0 - alpha_bar).sqrt()));
    let mut out = z0.clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = a * *o + s * *e;
    }
    Ok(out)
}

pub fn add_noise<T: Scalar>(z0: &LatentTensor<T>, eps: &LatentTensor<T>, t: usize, sched: &NoiseSchedule) -> Result<LatentTensor<T>> {
    mix_noise(z0, eps, sched.alpha_bar(t)?)
}

/// `min(snr, λ) / snr`.
pub fn min_snr_weight_of(snr: f64, lambda: f64) -> f64 {
    snr.min(lambda) / snr
}

pub fn min_snr_weight(t: usize, sched: &NoiseSchedule, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("min-SNR lambda must be positive, got {lambda}")));
    }
    Ok(min_snr_weight_of(sched.snr_at(t)?, lambda))
}

/// A point on the straight path from noise `x0` to data `x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPath<T> {
    pub t: f64,
    pub z_t: LatentTensor<T>,
    pub target_v: LatentTensor<T>,
}

pub fn flow_path<T: Scalar>(x0: &LatentTensor<T>, x1: &LatentTensor<T>, t: f64) -> Result<FlowPath<T>> {
    check_same(x0, x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Input(format!("flow time {t} outside [0, 1]")));
    }
    let (a, b) = (T::lit(1.0 - t), T::lit(t));
    let mut z_t = x0.clone();
    let mut target_v = x1.clone();
    for ((z, v), (&p, &q)) in z_t.data.iter_mut().zip(target_v.data.iter_mut()).zip(x0.data.iter().zip(&x1.data)) {
        *z = a * p + b * q;
        *v = q - p;
    }
    Ok(FlowPath { t, z_t, target_v })
}

/// One training example: clean latent, condition latent, caption tokens and
/// condition type.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a, T> {
    pub z0: &'a LatentTensor<T>,
    pub z_c: &'a LatentTensor<T>,
    pub caption: &'a [u32],
    pub modality: Modality,
}

/// Keys the per-sample draws: `(seed, step, sample index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrawKey {
    pub seed: u64,
    pub step: u64,
    /// Global index of the first sample of the batch.
    pub first_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    /// Per-sample weight `w(t)`; all ones for flow matching.
    pub weights: Vec<f64>,
    /// Per-sample mean squared error before weighting.
    pub mse: Vec<f64>,
    pub objective: Objective,
}

/// Loss settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub objective: Objective,
    pub schedule: NoiseSchedule,
    pub min_snr_lambda: f64,
}

impl LossConfig {
    pub fn new(objective: Objective) -> Self {
        LossConfig {
            objective,
            schedule: NoiseSchedule::default(),
            min_snr_lambda: DEFAULT_MIN_SNR_LAMBDA,
        }
    }
}

/// Noised inputs and regression targets for one batch.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub z_t: Vec<LatentTensor<T>>,
    pub targets: Vec<LatentTensor<T>>,
    pub times: Vec<TimeInput>,
    pub weights: Vec<f64>,
}

/// Draws `t` and the noise of every sample and forms `z_t` and the target.
pub fn prepare<T: Scalar>(cfg: &LossConfig, batch: &[TrainSample<'_, T>], key: DrawKey) -> Result<Prepared<T>> {
    let mut out = Prepared {
        z_t: Vec::with_capacity(batch.len()),
        targets: Vec::with_capacity(batch.len()),
        times: Vec::with_capacity(batch.len()),
        weights: Vec::with_capacity(batch.len()),
    };
    for (i, s) in batch.iter().enumerate() {
        check_same(s.z0, s.z_c)?;
        let mut r = rng::keyed(key.seed, Stream::Batch, key.step, key.first_index + i as u64);
        let (c, h, w) = s.z0.shape();
        match cfg.objective {
            Objective::Ddpm => {
                let t = r.random_range(1..=cfg.schedule.steps);
                let eps = LatentTensor::from_vec(c, h, w, rng::normal_vec(&mut r, c * h * w))?;
                out.z_t.push(add_noise(s.z0, &eps, t, &cfg.schedule)?);
                out.targets.push(eps);
                out.times.push(TimeInput::Discrete(t));
                out.weights.push(min_snr_weight(t, &cfg.schedule, cfg.min_snr_lambda)?);
            }
            Objective::Rfm => {
                let t: f64 = r.random_range(0.0..1.0);
                let x0 = LatentTensor::from_vec(c, h, w, rng::normal_vec(&mut r, c * h * w))?;
                let path = flow_path(&x0, s.z0, t)?;
                out.z_t.push(path.z_t);
                out.targets.push(path.target_v);
                out.times.push(TimeInput::Continuous(t));
                out.weights.push(1.0);
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> Prepared<T> {
    pub fn inputs<'a>(&'a self, batch: &[TrainSample<'a, T>]) -> Vec<ModelInput<'a, T>> {
        batch
            .iter()
            .enumerate()
            .map(|(i, s)| ModelInput {
                z_t: &self.z_t[i],
                z_c: s.z_c,
                time: self.times[i],
                caption: s.caption,
                modality: s.modality,
            })
            .collect()
    }

    /// Mean over the batch of `w·MSE`, and its gradient with respect to the
    /// predictions scaled by `grad_scale`.
    pub fn score(&self, objective: Objective, preds: &[Prediction<T>], grad_scale: f64) -> Result<(LossReport, Vec<Prediction<T>>)> {
        if preds.len() != self.targets.len() {
            return Err(Error::Shape(format!("{} predictions for {} targets", preds.len(), self.targets.len())));
        }
        let b = preds.len() as f64;
        let mut mse = Vec::with_capacity(preds.len());
        let mut grads = Vec::with_capacity(preds.len());
        let mut loss = 0.0;
        for ((p, y), &w) in preds.iter().zip(&self.targets).zip(&self.weights) {
            check_same(p, y)?;
            let n = p.len() as f64;
            let k = T::lit(2.0 * w * grad_scale / (b * n));
            let mut g = p.clone();
            let mut sq = 0.0;
            for (gv, &yv) in g.data.iter_mut().zip(&y.data) {
                let r = *gv - yv;
                sq += r.as_f64() * r.as_f64();
                *gv = k * r;
            }
            mse.push(sq / n);
            loss += w * sq / n;
            grads.push(g);
        }
        let loss = loss / b;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite {objective} loss")));
        }
        Ok((
            LossReport {
                loss,
                weights: self.weights.clone(),
                mse,
                objective,
            },
            grads,
        ))
    }
}

fn loss_with<T: Scalar, D: Denoiser<T>>(
    objective: Objective,
    cfg: &LossConfig,
    model: &D,
    batch: &[TrainSample<'_, T>],
    key: DrawKey,
) -> Result<LossReport> {
    let cfg = LossConfig { objective, ..cfg.clone() };
    let prep = prepare(&cfg, batch, key)?;
    let preds = model.predict(&prep.inputs(batch))?;
    Ok(prep.score(objective, &preds, 1.0)?.0)
}

/// Min-SNR weighted ε-prediction loss.
pub fn ddpm_loss<T: Scalar, D: Denoiser<T>>(
    model: &D,
    batch: &[TrainSample<'_, T>],
    sched: &NoiseSchedule,
    lambda: f64,
    key: DrawKey,
) -> Result<LossReport> {
    let cfg = LossConfig {
        objective: Objective::Ddpm,
        schedule: sched.clone(),
        min_snr_lambda: lambda,
    };
    loss_with(Objective::Ddpm, &cfg, model, batch, key)
}

/// Velocity regression loss.
pub fn rfm_loss<T: Scalar, D: Denoiser<T>>(model: &D, batch: &[TrainSample<'_, T>], key: DrawKey) -> Result<LossReport> {
    loss_with(Objective::Rfm, &LossConfig::new(Objective::Rfm), model, batch, key)
}

/// Loss and its parameter gradient, the gradient scaled by `grad_scale`.
pub fn loss_and_grad<T: Scalar>(
    cfg: &LossConfig,
    model: &DiT,
    params: &[T],
    batch: &[TrainSample<'_, T>],
    key: DrawKey,
    grad_scale: f64,
) -> Result<(LossReport, Vec<T>)> {
    let prep = prepare(cfg, batch, key)?;
    let (preds, tape) = model.forward_train(params, &prep.inputs(batch))?;
    let (report, d_preds) = prep.score(cfg.objective, &preds, grad_scale)?;
    let grads = model.backward(params, tape, &d_preds)?;
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Planar;

    fn lat(v: f64) -> Planar<f64> {
        Planar::from_vec(1, 2, 2, vec![v; 4]).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(1).unwrap(), 0.9999);
        assert!((s.snr_at(1).unwrap() - 9999.0).abs() < 1e-7);
        assert!(s.alphas_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.snr.iter().all(|&v| v > 0.0));
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(1001).is_err());
        assert!(make_linear_schedule(10, 0.2, 0.1).is_err());
        assert!(make_linear_schedule(0, 0.1, 0.2).is_err());
        assert!(make_linear_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn noise_mixing_limits() {
        let (z0, eps) = (lat(0.3), lat(-1.2));
        assert_eq!(mix_noise(&z0, &eps, 1.0).unwrap(), z0);
        assert_eq!(mix_noise(&z0, &eps, 0.0).unwrap(), eps);
        assert_eq!(mix_noise(&lat(0.0), &lat(1.0), 0.75).unwrap(), lat(0.5));
        assert!(mix_noise(&z0, &Planar::zeros(2, 2, 2), 0.5).is_err());
        assert!(add_noise(&z0, &eps, 0, &NoiseSchedule::default()).is_err());
    }

    #[test]
    fn min_snr_examples() {
        assert_eq!(min_snr_weight_of(25.0, 5.0), 0.2);
        assert_eq!(min_snr_weight_of(5.0, 5.0), 1.0);
        assert_eq!(min_snr_weight_of(0.5, 5.0), 1.0);
        let s = NoiseSchedule::default();
        let w: Vec<f64> = (1..=s.steps).map(|t| min_snr_weight(t, &s, 5.0).unwrap()).collect();
        assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
        assert!(w.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn flow_path_is_exact_interpolation() {
        let p = flow_path(&lat(-1.0), &lat(3.0), 0.25).unwrap();
        assert_eq!(p.z_t, lat(0.0));
        assert_eq!(p.target_v, lat(4.0));
        assert!(flow_path(&lat(0.0), &lat(0.0), 1.5).is_err());
    }

    #[test]
    fn objective_parsing() {
        assert_eq!("rfm".parse::<Objective>().unwrap(), Objective::Rfm);
        assert!(matches!("xyz".parse::<Objective>(), Err(Error::Usage(_))));
    }
}
