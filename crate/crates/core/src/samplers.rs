//! Guided generation: ancestral DDPM, DDIM and the Euler flow integrator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::LatentTensor;
use crate::conditioning::{Modality, TimeInput};
use crate::dit::{Denoiser, ModelInput, Prediction};
use crate::objectives::{NoiseSchedule, Objective};
use crate::rng::{self, Stream};
use crate::toydata::NULL_TOKEN;
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    DdpmAncestral,
    Ddim,
    RfmEuler,
}

impl SamplerKind {
    /// The training objective this sampler expects.
    pub fn objective(self) -> Objective {
        match self {
            SamplerKind::DdpmAncestral | SamplerKind::Ddim => Objective::Ddpm,
            SamplerKind::RfmEuler => Objective::Rfm,
        }
    }

    pub fn default_for(objective: Objective) -> Self {
        match objective {
            Objective::Ddpm => SamplerKind::Ddim,
            Objective::Rfm => SamplerKind::RfmEuler,
        }
    }

    pub fn check_objective(self, trained: Objective) -> Result<()> {
        if self.objective() != trained {
            return Err(Error::Usage(format!(
                "sampler {self} needs a {} checkpoint, this one was trained with {trained}",
                self.objective()
            )));
        }
        Ok(())
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::DdpmAncestral => "ddpm",
            SamplerKind::Ddim => "ddim",
            SamplerKind::RfmEuler => "euler",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" | "ddpm_ancestral" | "ancestral" => Ok(SamplerKind::DdpmAncestral),
            "ddim" => Ok(SamplerKind::Ddim),
            "euler" | "rfm_euler" => Ok(SamplerKind::RfmEuler),
            _ => Err(Error::Usage(format!("unknown sampler {s:?} (expected ddpm, ddim or euler)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    /// DDIM stochasticity; 0 is deterministic.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if self.kind != SamplerKind::RfmEuler && self.steps > sched.steps {
            return Err(Error::Config(format!("{} steps exceed the {}-step schedule", self.steps, sched.steps)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be non-negative, got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub null_caption: Vec<u32>,
    /// Also replace `z_c` by zeros in the unconditional branch.
    pub null_condition: bool,
    /// Evaluate both branches as one doubled batch.
    pub batched: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            omega: 4.0,
            null_caption: vec![NULL_TOKEN],
            null_condition: false,
            batched: true,
        }
    }
}

impl GuidanceConfig {
    pub fn with_omega(omega: f64) -> Self {
        GuidanceConfig {
            omega,
            ..Self::default()
        }
    }
}

/// `uncond + ω·(cond − uncond)`; returns `cond` for ω = 1 and `uncond`
/// for ω = 0 unchanged.
pub fn cfg_combine<T: Scalar>(uncond: &Prediction<T>, cond: &Prediction<T>, omega: f64) -> Result<Prediction<T>> {
    if !uncond.same_shape(cond) {
        return Err(Error::Input(format!(
            "guidance branches differ in shape: {:?} vs {:?}",
            uncond.shape(),
            cond.shape()
        )));
    }
    if !omega.is_finite() {
        return Err(Error::Config(format!("guidance scale must be finite, got {omega}")));
    }
    if omega == 1.0 {
        return Ok(cond.clone());
    }
    if omega == 0.0 {
        return Ok(uncond.clone());
    }
    let w = T::lit(omega);
    let mut out = uncond.clone();
    for (o, &c) in out.data.iter_mut().zip(&cond.data) {
        *o = *o + w * (c - *o);
    }
    Ok(out)
}

/// One image to generate.
#[derive(Debug, Clone, Copy)]
pub struct SampleRequest<'a, T> {
    pub z_c: &'a LatentTensor<T>,
    pub caption: &'a [u32],
    pub modality: Modality,
}

/// Starting latent of request `index`: standard normal keyed on the seed.
pub fn initial_noise<T: Scalar>(seed: u64, index: usize, shape: (usize, usize, usize)) -> LatentTensor<T> {
    let (c, h, w) = shape;
    let mut r = rng::keyed(seed, Stream::Sampler, index as u64, 0);
    LatentTensor::from_vec(c, h, w, rng::normal_vec(&mut r, c * h * w)).expect("sized")
}

fn step_noise<T: Scalar>(seed: u64, index: usize, step: usize, shape: (usize, usize, usize)) -> LatentTensor<T> {
    let (c, h, w) = shape;
    let mut r = rng::keyed(seed, Stream::Sampler, index as u64, step as u64 + 1);
    LatentTensor::from_vec(c, h, w, rng::normal_vec(&mut r, c * h * w)).expect("sized")
}

/// Descending timesteps `T = t_0 > t_1 > … ≥ 1` for `n` reverse steps.
pub fn timesteps(total: usize, n: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (0..n)
        .map(|i| ((total * (n - i)) as f64 / n as f64).round() as usize)
        .map(|t| t.clamp(1, total))
        .collect();
    ts.dedup();
    ts
}

/// Guided prediction for every request at the current latents.
fn guided<T: Scalar, D: Denoiser<T>>(
    model: &D,
    reqs: &[SampleRequest<'_, T>],
    z: &[LatentTensor<T>],
    time: TimeInput,
    g: &GuidanceConfig,
) -> Result<Vec<Prediction<T>>> {
    let zeros: Vec<LatentTensor<T>> = if g.null_condition {
        reqs.iter().map(|r| LatentTensor::zeros(r.z_c.channels, r.z_c.height, r.z_c.width)).collect()
    } else {
        Vec::new()
    };
    let cond: Vec<ModelInput<'_, T>> = reqs
        .iter()
        .zip(z)
        .map(|(r, z)| ModelInput {
            z_t: z,
            z_c: r.z_c,
            time,
            caption: r.caption,
            modality: r.modality,
        })
        .collect();
    let uncond: Vec<ModelInput<'_, T>> = cond
        .iter()
        .enumerate()
        .map(|(i, c)| ModelInput {
            caption: &g.null_caption,
            z_c: if g.null_condition { &zeros[i] } else { c.z_c },
            ..*c
        })
        .collect();
    let (u, c) = if g.omega == 1.0 {
        (None, model.predict(&cond)?)
    } else if g.omega == 0.0 {
        (Some(model.predict(&uncond)?), Vec::new())
    } else if g.batched {
        let both: Vec<_> = uncond.iter().chain(&cond).copied().collect();
        let mut all = model.predict(&both)?;
        let c = all.split_off(reqs.len());
        (Some(all), c)
    } else {
        (Some(model.predict(&uncond)?), model.predict(&cond)?)
    };
    match u {
        None => Ok(c),
        Some(u) if g.omega == 0.0 => Ok(u),
        Some(u) => u.iter().zip(&c).map(|(u, c)| cfg_combine(u, c, g.omega)).collect(),
    }
}

fn axpby<T: Scalar>(a: f64, x: &LatentTensor<T>, b: f64, y: &LatentTensor<T>) -> LatentTensor<T> {
    let (a, b) = (T::lit(a), T::lit(b));
    let mut out = x.clone();
    for (o, &v) in out.data.iter_mut().zip(&y.data) {
        *o = a * *o + b * v;
    }
    out
}

fn check_requests<T: Scalar>(reqs: &[SampleRequest<'_, T>]) -> Result<(usize, usize, usize)> {
    let first = reqs.first().ok_or_else(|| Error::Input("nothing to sample".into()))?;
    let shape = first.z_c.shape();
    if reqs.iter().any(|r| r.z_c.shape() != shape) {
        return Err(Error::Input("condition latents of one call must share a shape".into()));
    }
    Ok(shape)
}

/// Generates one latent per request. Request `i` draws its noise from
/// `(seed, i)`, so results do not depend on how requests are grouped.
pub fn sample<T: Scalar, D: Denoiser<T>>(
    model: &D,
    reqs: &[SampleRequest<'_, T>],
    guidance: &GuidanceConfig,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<LatentTensor<T>>> {
    cfg.validate(sched)?;
    let shape = check_requests(reqs)?;
    let mut z: Vec<LatentTensor<T>> = (0..reqs.len()).map(|i| initial_noise(cfg.seed, i, shape)).collect();
    match cfg.kind {
        SamplerKind::RfmEuler => {
            let dt = 1.0 / cfg.steps as f64;
            for i in 0..cfg.steps {
                let t = i as f64 * dt;
                let v = guided(model, reqs, &z, TimeInput::Continuous(t), guidance)?;
                z = z.iter().zip(&v).map(|(z, v)| axpby(1.0, z, dt, v)).collect();
            }
        }
        SamplerKind::Ddim | SamplerKind::DdpmAncestral => {
            let ts = timesteps(sched.steps, cfg.steps);
            for (k, &t) in ts.iter().enumerate() {
                let ab = sched.alpha_bar(t)?;
                let ab_prev = match ts.get(k + 1) {
                    Some(&p) => sched.alpha_bar(p)?,
                    None => 1.0,
                };
                let eps = guided(model, reqs, &z, TimeInput::Discrete(t), guidance)?;
                let mut next = Vec::with_capacity(z.len());
                for (i, (zi, ei)) in z.iter().zip(&eps).enumerate() {
                    let x0 = axpby(1.0 / ab.sqrt(), zi, -(1.0 - ab).sqrt() / ab.sqrt(), ei);
                    let last = k + 1 == ts.len();
                    let zn = match cfg.kind {
                        SamplerKind::Ddim => {
                            let sigma = cfg.eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
                            let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
                            let mut zn = axpby(ab_prev.sqrt(), &x0, dir, ei);
                            if sigma > 0.0 && !last {
                                zn = axpby(1.0, &zn, sigma, &step_noise(cfg.seed, i, k, shape));
                            }
                            zn
                        }
                        _ => {
                            let alpha = ab / ab_prev;
                            let beta = 1.0 - alpha;
                            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                            let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                            let mut zn = axpby(c0, &x0, ct, zi);
                            if !last {
                                let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
                                zn = axpby(1.0, &zn, var.sqrt(), &step_noise(cfg.seed, i, k, shape));
                            }
                            zn
                        }
                    };
                    next.push(zn);
                }
                z = next;
            }
        }
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite values".into()));
    }
    Ok(z)
}

fn single<T: Scalar, D: Denoiser<T>>(
    model: &D,
    req: SampleRequest<'_, T>,
    guidance: &GuidanceConfig,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<LatentTensor<T>> {
    Ok(sample(model, &[req], guidance, cfg, sched)?.remove(0))
}

/// DDPM-family sampling (ancestral or DDIM per `cfg.kind`).
pub fn sample_ddpm<T: Scalar, D: Denoiser<T>>(
    model: &D,
    req: SampleRequest<'_, T>,
    guidance: &GuidanceConfig,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<LatentTensor<T>> {
    if cfg.kind == SamplerKind::RfmEuler {
        return Err(Error::Usage("sample_ddpm needs a ddpm or ddim sampler".into()));
    }
    single(model, req, guidance, cfg, sched)
}

/// Euler integration of the guided velocity field from t = 0 to 1.
pub fn sample_rfm_euler<T: Scalar, D: Denoiser<T>>(
    model: &D,
    req: SampleRequest<'_, T>,
    guidance: &GuidanceConfig,
    cfg: &SamplerConfig,
) -> Result<LatentTensor<T>> {
    let cfg = SamplerConfig {
        kind: SamplerKind::RfmEuler,
        ..cfg.clone()
    };
    single(model, req, guidance, &cfg, &NoiseSchedule::default())
}
