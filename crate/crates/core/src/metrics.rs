//! SSIM, pixel accuracy and IoU against the exact palette segmenter, and
//! held-out evaluation of a checkpoint.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::codec::CodecConfig;
use crate::conditioning::Modality;
use crate::dit::{Bound, DiT};
use crate::objectives::NoiseSchedule;
use crate::raster::{LabelRaster, Planar, RgbImage};
use crate::samplers::{self, GuidanceConfig, SampleRequest, SamplerConfig};
use crate::toydata::{self, Attribute, Dataset, NUM_CLASSES, PALETTE};
use crate::trainer::condition_latent;
use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all valid 11×11 Gaussian windows and channels of two
/// images with values in `[0, 1]`.
pub fn ssim(a: &Planar<f64>, b: &Planar<f64>) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Input(format!("SSIM inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ch, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..ch {
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, gy) in g.iter().enumerate() {
                    for (dx, gx) in g.iter().enumerate() {
                        let wgt = gy * gx;
                        let va = a.at(c, y + dy, x + dx);
                        let vb = b.at(c, y + dy, x + dx);
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (ch * oh * ow) as f64)
}

/// Class of the nearest palette color at every pixel.
pub fn segment_toy(image: &RgbImage) -> LabelRaster {
    let mut out = LabelRaster::new(image.width, image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            out.set(x, y, PALETTE[toydata::nearest_palette_entry(image.pixel(x, y))].class);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskAgreement {
    pub pixel_accuracy: f64,
    /// `None` for classes absent from both rasters.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-class intersection and union pixel counts plus matching pixels.
#[derive(Debug, Clone, Default, PartialEq)]
struct Counts {
    inter: [u64; NUM_CLASSES],
    union: [u64; NUM_CLASSES],
    gt_present: [bool; NUM_CLASSES],
    matches: u64,
    total: u64,
}

fn count(pred: &LabelRaster, gt: &LabelRaster) -> Result<Counts> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::Input(format!(
            "label rasters differ in size: {}×{} vs {}×{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut c = Counts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if p as usize >= NUM_CLASSES || g as usize >= NUM_CLASSES {
            return Err(Error::Input(format!("label {} is not a class", p.max(g))));
        }
        c.total += 1;
        c.gt_present[g as usize] = true;
        if p == g {
            c.matches += 1;
            c.inter[p as usize] += 1;
            c.union[p as usize] += 1;
        } else {
            c.union[p as usize] += 1;
            c.union[g as usize] += 1;
        }
    }
    Ok(c)
}

pub fn mask_agreement(pred: &LabelRaster, gt: &LabelRaster) -> Result<MaskAgreement> {
    let c = count(pred, gt)?;
    let per_class_iou: Vec<Option<f64>> = (0..NUM_CLASSES)
        .map(|k| (c.union[k] > 0).then(|| c.inter[k] as f64 / c.union[k] as f64))
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    Ok(MaskAgreement {
        pixel_accuracy: c.matches as f64 / c.total.max(1) as f64,
        miou: if present.is_empty() { 1.0 } else { present.iter().sum::<f64>() / present.len() as f64 },
        per_class_iou,
    })
}

/// One evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: u64,
    pub ssim: f64,
    pub pixel_accuracy: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean over samples.
    pub ssim: f64,
    /// Matching pixels over all pixels of all samples.
    pub pixel_accuracy: f64,
    /// Mean of `per_class_iou` over classes present in the ground truth.
    pub miou: f64,
    pub n_samples: usize,
    /// Pooled over all samples; NaN for classes never seen.
    pub per_class_iou: Vec<f64>,
    pub samples: Vec<SampleScore>,
}

pub const REPORT_FILE: &str = "eval_report.txt";
pub const SAMPLES_FILE: &str = "eval_samples.csv";

impl EvalReport {
    /// Scores generated images against ground-truth images and masks.
    pub fn score(items: &[(u64, &RgbImage, &RgbImage, &LabelRaster)]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Input("no samples to score".into()));
        }
        let mut pooled = Counts::default();
        let mut samples = Vec::with_capacity(items.len());
        for &(id, generated, truth, mask) in items {
            let s = ssim(&generated.to_unit(), &truth.to_unit())?;
            let seg = segment_toy(generated);
            let a = mask_agreement(&seg, mask)?;
            let c = count(&seg, mask)?;
            for k in 0..NUM_CLASSES {
                pooled.inter[k] += c.inter[k];
                pooled.union[k] += c.union[k];
                pooled.gt_present[k] |= c.gt_present[k];
            }
            pooled.matches += c.matches;
            pooled.total += c.total;
            samples.push(SampleScore {
                id,
                ssim: s,
                pixel_accuracy: a.pixel_accuracy,
                miou: a.miou,
            });
        }
        let per_class_iou: Vec<f64> = (0..NUM_CLASSES)
            .map(|k| {
                if pooled.union[k] > 0 {
                    pooled.inter[k] as f64 / pooled.union[k] as f64
                } else {
                    f64::NAN
                }
            })
            .collect();
        let present: Vec<f64> = (0..NUM_CLASSES).filter(|&k| pooled.gt_present[k]).map(|k| per_class_iou[k]).collect();
        Ok(EvalReport {
            ssim: samples.iter().map(|s| s.ssim).sum::<f64>() / samples.len() as f64,
            pixel_accuracy: pooled.matches as f64 / pooled.total as f64,
            miou: present.iter().sum::<f64>() / present.len() as f64,
            n_samples: samples.len(),
            per_class_iou,
            samples,
        })
    }

    /// Writes `eval_report.txt` (key=value) and `eval_samples.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut kv = String::new();
        let _ = writeln!(kv, "ssim={}", self.ssim);
        let _ = writeln!(kv, "pixel_accuracy={}", self.pixel_accuracy);
        let _ = writeln!(kv, "miou={}", self.miou);
        let _ = writeln!(kv, "n_samples={}", self.n_samples);
        for (k, v) in self.per_class_iou.iter().enumerate() {
            let _ = writeln!(kv, "iou_{}={v}", toydata::CLASS_NAMES[k]);
        }
        let p = dir.join(REPORT_FILE);
        fs::write(&p, kv).map_err(|e| Error::io(&p, e))?;
        let mut csv = String::from("id,ssim,pixel_accuracy,miou\n");
        for s in &self.samples {
            let _ = writeln!(csv, "{},{},{},{}", s.id, s.ssim, s.pixel_accuracy, s.miou);
        }
        let p = dir.join(SAMPLES_FILE);
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))
    }
}

/// What to generate for each held-out sample.
#[derive(Debug, Clone)]
pub struct GenerationSpec {
    pub modality: Modality,
    /// Take the spatial condition of held-out sample `condition_from[i]`
    /// instead of sample `i`.
    pub condition_from: Option<Vec<usize>>,
    /// Caption per sample; `None` keeps the stored caption.
    pub captions: Option<Vec<Vec<u32>>>,
}

impl GenerationSpec {
    pub fn matched(modality: Modality) -> Self {
        GenerationSpec {
            modality,
            condition_from: None,
            captions: None,
        }
    }
}

/// Generates images for the first `n` held-out samples of `ds`.
#[allow(clippy::too_many_arguments)]
pub fn generate_held_out(
    model: &DiT,
    params: &[f32],
    codec: &CodecConfig,
    ds: &Dataset,
    n: usize,
    spec: &GenerationSpec,
    guidance: &GuidanceConfig,
    sampler: &SamplerConfig,
) -> Result<Vec<RgbImage>> {
    let held = ds.held_out_range();
    if n == 0 || n > held.len() {
        return Err(Error::Input(format!("requested {n} samples, held-out split has {}", held.len())));
    }
    let stored: Vec<_> = held.take(n).map(|i| ds.load(i)).collect::<Result<_>>()?;
    let conds: Vec<_> = (0..n)
        .map(|i| {
            let src = spec.condition_from.as_ref().map_or(i, |p| p[i]);
            let s = &stored[src];
            condition_latent::<f32>(codec, spec.modality, &s.mask, &s.sketch)
        })
        .collect::<Result<_>>()?;
    let captions: Vec<Vec<u32>> = match &spec.captions {
        Some(c) => c.clone(),
        None => stored.iter().map(|s| s.record.caption_tokens.clone()).collect(),
    };
    let reqs: Vec<SampleRequest<'_, f32>> = (0..n)
        .map(|i| SampleRequest {
            z_c: &conds[i],
            caption: &captions[i],
            modality: spec.modality,
        })
        .collect();
    let bound = Bound { model, params };
    let latents = samplers::sample(&bound, &reqs, guidance, sampler, &NoiseSchedule::default())?;
    latents.iter().map(|z| codec.decode(z)?.to_rgb()).collect()
}

/// Generates from the first `n` held-out (mask, caption) pairs with the
/// checkpoint's EMA weights and scores the results.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset_dir: &Path,
    sampler: &SamplerConfig,
    guidance: &GuidanceConfig,
    n: usize,
    use_ema: bool,
) -> Result<EvalReport> {
    sampler.kind.check_objective(ckpt.meta.train.objective)?;
    let ds = Dataset::open(dataset_dir)?;
    let model = DiT::new(ckpt.meta.model.clone())?;
    let params = if use_ema { &ckpt.ema } else { &ckpt.params };
    let spec = GenerationSpec::matched(Modality::Mask);
    let images = generate_held_out(&model, params, &ckpt.meta.codec, &ds, n, &spec, guidance, sampler)?;
    score_against_held_out(&ds, &images)
}

/// Scores `images[i]` against held-out sample `i`.
pub fn score_against_held_out(ds: &Dataset, images: &[RgbImage]) -> Result<EvalReport> {
    let held = ds.held_out_range();
    if images.len() > held.len() {
        return Err(Error::Input(format!("{} images for a held-out split of {}", images.len(), held.len())));
    }
    let stored: Vec<_> = held.take(images.len()).map(|i| ds.load(i)).collect::<Result<_>>()?;
    let items: Vec<_> = stored
        .iter()
        .zip(images)
        .map(|(s, g)| (s.record.id, g, &s.image, &s.mask))
        .collect();
    EvalReport::score(&items)
}

/// Most frequent palette variant among pixels of `image` whose mask class
/// is `class`; `None` if the class is absent or no pixel maps to it.
pub fn majority_variant(image: &RgbImage, mask: &LabelRaster, class: u8) -> Option<u8> {
    let mut votes = [0usize; PALETTE.len()];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) == class {
                votes[toydata::nearest_palette_entry(image.pixel(x, y))] += 1;
            }
        }
    }
    let (best, &n) = votes
        .iter()
        .enumerate()
        .filter(|(i, _)| PALETTE[*i].class == class)
        .max_by_key(|(i, &v)| (v, std::cmp::Reverse(*i)))?;
    (n > 0).then_some(PALETTE[best].variant)
}

/// Caption with attribute `attr` set to `value`.
pub fn with_attribute(caption: &[u32], attr: Attribute, value: usize) -> Vec<u32> {
    let mut out: Vec<u32> = caption
        .iter()
        .copied()
        .filter(|&t| Attribute::of_token(t).is_none_or(|(a, _)| a != attr))
        .collect();
    out.push(attr.token(value));
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(w: usize, h: usize, v: &[u8]) -> LabelRaster {
        let mut r = LabelRaster::new(w, h);
        r.data.copy_from_slice(v);
        r
    }

    #[test]
    fn worked_mask_example() {
        let a = mask_agreement(&labels(2, 2, &[0, 1, 1, 1]), &labels(2, 2, &[0, 0, 1, 1])).unwrap();
        assert_eq!(a.pixel_accuracy, 0.75);
        assert_eq!(a.per_class_iou[0], Some(0.5));
        assert_eq!(a.per_class_iou[1], Some(2.0 / 3.0));
        assert_eq!(a.per_class_iou[2], None);
        assert!((a.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_and_invalid_labels() {
        let a = mask_agreement(&labels(2, 1, &[1, 0]), &labels(2, 1, &[0, 1])).unwrap();
        assert_eq!((a.pixel_accuracy, a.miou), (0.0, 0.0));
        assert!(matches!(mask_agreement(&labels(1, 1, &[7]), &labels(1, 1, &[0])), Err(Error::Input(_))));
    }

    #[test]
    fn ssim_basics() {
        let c = Planar::from_vec(1, 12, 12, vec![0.3; 144]).unwrap();
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        let x = Planar::from_vec(1, 12, 12, (0..144).map(|i| ((i / 3 + i / 12) % 2) as f64).collect()).unwrap();
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &inv).unwrap() < 0.0);
        assert!(ssim(&x, &Planar::zeros(1, 4, 4)).is_err());
    }

    #[test]
    fn tie_goes_to_lower_class() {
        // Equidistant from the two first background colors.
        let a = PALETTE[0].rgb;
        let b = PALETTE[1].rgb;
        let mid = [(a[0] as u16 + b[0] as u16) / 2, (a[1] as u16 + b[1] as u16) / 2, (a[2] as u16 + b[2] as u16) / 2];
        let img = RgbImage::filled(1, 1, [mid[0] as u8, mid[1] as u8, mid[2] as u8]);
        assert_eq!(segment_toy(&img).get(0, 0), 0);
        let hair = RgbImage::filled(3, 3, PALETTE[6].rgb);
        assert!(segment_toy(&hair).data.iter().all(|&c| c == toydata::CLASS_HAIR));
    }

    #[test]
    fn attribute_replacement() {
        let cap = [2, 4, 8, 12, 14];
        assert_eq!(with_attribute(&cap, Attribute::Hair, 3), vec![2, 4, 10, 12, 14]);
    }
}
