//! The dual-stream diffusion transformer.
//!
//! Image tokens come from a patch embedding over the channel-concatenated
//! `[z_t; z_c]` latent; text tokens from a projection of the caption
//! sequence. Each block keeps separate Q/K/V, output and MLP weights per
//! stream, and the streams meet in a single softmax attention over the
//! concatenated `[image; text]` sequence with axial RoPE on image tokens and
//! sequential RoPE on text tokens. All adaptive-LN shift/scale/gate vectors of
//! a block (twelve `D`-vectors) come from one linear map of `SiLU(C_global)`.
//!
//! Forward and backward are written out by hand. A batch is processed in
//! fixed-size chunks: token rows of a chunk are stacked for the dense layers
//! and attention runs per sample.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::codec::LatentTensor;
use crate::conditioning::{CondCache, CondInput, Conditioner, Modality, TimeInput};
use crate::nn::ops::{self, linear_backward, linear_forward, ModSlice};
use crate::nn::{Init, Layout, Linear};
use crate::par::{self, Exec};
use crate::raster::Planar;
use crate::rope::RopePlan;
use crate::toydata;
use crate::{Error, Result, Scalar};

const INIT_STD: f64 = 0.02;

/// A latent-shaped network output: noise for DDPM, velocity for flow matching.
pub type Prediction<T> = LatentTensor<T>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub mlp_ratio: usize,
    pub text_dim: usize,
    pub text_len_max: usize,
    pub vocab_size: usize,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    pub rope_theta: f64,
    pub modalities: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    /// Full-scale profile: 28 blocks of width 1152 with 16 heads over a
    /// 16-channel latent and a 1024-wide, 77-token text encoder.
    pub fn paper_profile() -> Self {
        ModelConfig {
            hidden: 1152,
            depth: 28,
            heads: 16,
            patch: 2,
            latent_channels: 16,
            mlp_ratio: 4,
            text_dim: 1024,
            text_len_max: 77,
            vocab_size: crate::toydata::VOCAB_SIZE,
            freq_dim: 256,
            rope_theta: 10_000.0,
            modalities: 2,
            init_seed: 0,
        }
    }

    /// Desk-scale profile for 32×32 images through a two-level Haar codec.
    pub fn toy() -> Self {
        ModelConfig {
            hidden: 128,
            depth: 4,
            heads: 4,
            patch: 2,
            latent_channels: 48,
            mlp_ratio: 4,
            text_dim: 64,
            text_len_max: 8,
            vocab_size: toydata::VOCAB_SIZE,
            freq_dim: 128,
            rope_theta: 10_000.0,
            modalities: 2,
            init_seed: 0,
        }
    }

    /// Smallest configuration used by the gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            hidden: 16,
            depth: 2,
            heads: 2,
            patch: 2,
            latent_channels: 3,
            mlp_ratio: 4,
            text_dim: 8,
            text_len_max: 4,
            vocab_size: toydata::VOCAB_SIZE,
            freq_dim: 16,
            rope_theta: 10_000.0,
            modalities: 2,
            init_seed: 0,
        }
    }

    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 || self.depth == 0 || self.heads == 0 || self.patch == 0 {
            return fail("hidden, depth, heads and patch must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.head_dim() % 4 != 0 {
            return fail(format!("head dimension {} not divisible by 4", self.head_dim()));
        }
        if self.latent_channels == 0 || self.mlp_ratio == 0 || self.text_dim == 0 || self.text_len_max == 0 {
            return fail("latent_channels, mlp_ratio, text_dim and text_len_max must be positive".into());
        }
        if self.vocab_size == 0 || self.modalities == 0 {
            return fail("vocab_size and modalities must be positive".into());
        }
        if self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return fail(format!("freq_dim must be even, got {}", self.freq_dim));
        }
        if !(self.rope_theta > 1.0) {
            return fail(format!("rope_theta must exceed 1, got {}", self.rope_theta));
        }
        Ok(())
    }
}

/// Closed-form count of learnable scalars for `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> u64 {
    let d = cfg.hidden as u64;
    let dt = cfg.text_dim as u64;
    let r = cfg.mlp_ratio as u64;
    let patch_in = (cfg.patch * cfg.patch * cfg.in_channels()) as u64;
    let patch_out = (cfg.patch * cfg.patch * cfg.latent_channels) as u64;
    let lin = |i: u64, o: u64| i * o + o;
    let stream = lin(d, 3 * d) + lin(d, d) + lin(d, r * d) + lin(r * d, d);
    let block = lin(d, 12 * d) + 2 * stream;
    let embed = lin(patch_in, d)
        + lin(cfg.freq_dim as u64, d)
        + lin(d, d)
        + cfg.vocab_size as u64 * dt
        + cfg.text_len_max as u64 * dt
        + lin(dt, dt)
        + lin(dt, d)
        + lin(d, d)
        + cfg.modalities as u64 * d
        + lin(dt, d);
    let head = lin(d, 2 * d) + lin(d, patch_out);
    embed + cfg.depth as u64 * block + head
}

/// Per-block count; with `mlp_ratio = 4` this is `36·D² + 30·D`.
pub fn block_parameters(cfg: &ModelConfig) -> u64 {
    let d = cfg.hidden as u64;
    let r = cfg.mlp_ratio as u64;
    let lin = |i: u64, o: u64| i * o + o;
    lin(d, 12 * d) + 2 * (lin(d, 3 * d) + lin(d, d) + lin(d, r * d) + lin(r * d, d))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamWeights {
    pub qkv: Linear,
    pub out: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    /// `SiLU(C_global) → 12·D` modulation.
    pub ada: Linear,
    pub image: StreamWeights,
    pub text: StreamWeights,
}

/// Network architecture: configuration plus parameter slots. Parameters
/// live in a separate flat buffer so the same architecture evaluates model
/// weights, EMA weights, or finite-difference perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct DiT {
    pub config: ModelConfig,
    pub layout: Layout,
    pub patch_embed: Linear,
    pub cond: Conditioner,
    pub text_proj: Linear,
    pub blocks: Vec<BlockWeights>,
    pub final_ada: Linear,
    pub final_proj: Linear,
    /// Rows processed together in dense layers.
    pub chunk: usize,
    pub exec: Exec,
}

/// One sample fed to the network.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a, T> {
    pub z_t: &'a LatentTensor<T>,
    pub z_c: &'a LatentTensor<T>,
    pub time: TimeInput,
    pub caption: &'a [u32],
    pub modality: Modality,
}

/// Paired image/text token sequences of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStreams<T> {
    /// `N × D`.
    pub image: Vec<T>,
    /// `L × D`.
    pub text: Vec<T>,
    pub grid: (usize, usize),
}

/// Anything that maps a batch of inputs to latent-shaped predictions.
pub trait Denoiser<T> {
    fn predict(&self, inputs: &[ModelInput<'_, T>]) -> Result<Vec<Prediction<T>>>;
}

impl<T, F> Denoiser<T> for F
where
    F: Fn(&[ModelInput<'_, T>]) -> Result<Vec<Prediction<T>>>,
{
    fn predict(&self, inputs: &[ModelInput<'_, T>]) -> Result<Vec<Prediction<T>>> {
        self(inputs)
    }
}

/// An architecture paired with one parameter buffer.
#[derive(Debug, Clone, Copy)]
pub struct Bound<'a, T> {
    pub model: &'a DiT,
    pub params: &'a [T],
}

impl<T: Scalar> Denoiser<T> for Bound<'_, T> {
    fn predict(&self, inputs: &[ModelInput<'_, T>]) -> Result<Vec<Prediction<T>>> {
        self.model.forward(self.params, inputs)
    }
}

/// Flattens non-overlapping `p×p` patches of `z` into rows of length
/// `C·p²` (channel, then patch row, then patch column), patches row-major.
pub fn patch_flatten<T: Scalar>(z: &Planar<T>, p: usize) -> Result<(Vec<T>, (usize, usize))> {
    let (c, h, w) = z.shape();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("latent {h}×{w} not divisible by patch {p}")));
    }
    let (gr, gc) = (h / p, w / p);
    let mut out = Vec::with_capacity(c * h * w);
    for r in 0..gr {
        for col in 0..gc {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out.push(z.at(ch, r * p + dy, col * p + dx));
                    }
                }
            }
        }
    }
    Ok((out, (gr, gc)))
}

/// Inverse of [`patch_flatten`].
pub fn unpatchify<T: Scalar>(tokens: &[T], grid: (usize, usize), p: usize, channels: usize) -> Result<Planar<T>> {
    let per = channels * p * p;
    let (gr, gc) = grid;
    if tokens.len() != gr * gc * per {
        return Err(Error::Shape(format!(
            "{} values do not form a {gr}×{gc} grid of {per}-wide tokens",
            tokens.len()
        )));
    }
    let mut z = Planar::zeros(channels, gr * p, gc * p);
    let mut it = tokens.iter();
    for r in 0..gr {
        for col in 0..gc {
            for ch in 0..channels {
                for dy in 0..p {
                    for dx in 0..p {
                        *z.at_mut(ch, r * p + dy, col * p + dx) = *it.next().expect("length checked");
                    }
                }
            }
        }
    }
    Ok(z)
}

struct StreamCache<T> {
    rows: usize,
    x_in: Vec<T>,
    h1: Vec<T>,
    rstd1: Vec<T>,
    hm1: Vec<T>,
    o: Vec<T>,
    a: Vec<T>,
    h2: Vec<T>,
    rstd2: Vec<T>,
    hm2: Vec<T>,
    m1: Vec<T>,
    g: Vec<T>,
    m2: Vec<T>,
}

struct SampleAttn<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
}

struct BlockCache<T> {
    mods: Vec<T>,
    image: StreamCache<T>,
    text: StreamCache<T>,
    attn: Vec<SampleAttn<T>>,
}

struct FinalCache<T> {
    mods: Vec<T>,
    h: Vec<T>,
    rstd: Vec<T>,
    hm: Vec<T>,
}

/// Layout of one chunk of samples.
struct ChunkCtx<T> {
    batch: usize,
    n_img: usize,
    grid: (usize, usize),
    out_shape: (usize, usize, usize),
    txt_offsets: Vec<usize>,
    row_img: Vec<usize>,
    row_txt: Vec<usize>,
    plans: BTreeMap<usize, RopePlan<T>>,
}

impl<T: Scalar> ChunkCtx<T> {
    fn text_len(&self, s: usize) -> usize {
        self.txt_offsets[s + 1] - self.txt_offsets[s]
    }

    fn plan(&self, s: usize) -> &RopePlan<T> {
        &self.plans[&self.text_len(s)]
    }
}

/// Activations of one chunk, consumed by [`DiT::backward`].
pub struct ChunkTape<T> {
    ctx: ChunkCtx<T>,
    patches: Vec<T>,
    cond_cache: CondCache<T>,
    cond: Vec<T>,
    sc: Vec<T>,
    seq: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    final_x: Vec<T>,
    fin: FinalCache<T>,
}

/// Activations of a whole batch.
pub struct Tape<T> {
    chunks: Vec<ChunkTape<T>>,
    chunk: usize,
}

impl<T> Tape<T> {
    pub fn len(&self) -> usize {
        self.chunks.iter().map(|c| c.ctx.batch).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// Modulation layout inside the 12·D block vector: per stream
// (shift_attn, scale_attn, gate_attn, shift_mlp, scale_mlp, gate_mlp).
const SHIFT_ATTN: usize = 0;
const SCALE_ATTN: usize = 1;
const GATE_ATTN: usize = 2;
const SHIFT_MLP: usize = 3;
const SCALE_MLP: usize = 4;
const GATE_MLP: usize = 5;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stream {
    Image,
    Text,
}

impl DiT {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let w = Init::TruncNormal(INIT_STD);
        let mut layout = Layout::new();
        let patch_in = config.patch * config.patch * config.in_channels();
        let patch_out = config.patch * config.patch * config.latent_channels;
        let patch_embed = Linear::new(&mut layout, "patch_embed", patch_in, d, w, true);
        let cond = Conditioner::new(
            &mut layout,
            d,
            config.text_dim,
            config.freq_dim,
            config.vocab_size,
            config.text_len_max,
            config.modalities,
        );
        let text_proj = Linear::new(&mut layout, "text_proj", config.text_dim, d, w, true);
        let stream = |layout: &mut Layout, name: String| StreamWeights {
            qkv: Linear::new(layout, &format!("{name}.qkv"), d, 3 * d, w, true),
            out: Linear::new(layout, &format!("{name}.out"), d, d, w, true),
            fc1: Linear::new(layout, &format!("{name}.mlp.fc1"), d, config.mlp_ratio * d, w, true),
            fc2: Linear::new(layout, &format!("{name}.mlp.fc2"), config.mlp_ratio * d, d, w, true),
        };
        let blocks = (0..config.depth)
            .map(|i| BlockWeights {
                ada: Linear::new(&mut layout, &format!("blocks.{i}.ada"), d, 12 * d, Init::Zeros, false),
                image: stream(&mut layout, format!("blocks.{i}.image")),
                text: stream(&mut layout, format!("blocks.{i}.text")),
            })
            .collect();
        let final_ada = Linear::new(&mut layout, "final.ada", d, 2 * d, Init::Zeros, false);
        let final_proj = Linear::new(&mut layout, "final.proj", d, patch_out, Init::Zeros, true);
        Ok(DiT {
            config,
            layout,
            patch_embed,
            cond,
            text_proj,
            blocks,
            final_ada,
            final_proj,
            chunk: 8,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    /// Freshly initialized parameters (zero modulation and output head).
    pub fn init_params<T: Scalar>(&self) -> Vec<T> {
        self.layout.init(self.config.init_seed)
    }

    /// Patch embedding of a `2c × h × w` input.
    pub fn patchify<T: Scalar>(&self, params: &[T], z_in: &Planar<T>) -> Result<Vec<T>> {
        if z_in.channels != self.config.in_channels() {
            return Err(Error::Shape(format!(
                "input has {} channels, model expects {}",
                z_in.channels,
                self.config.in_channels()
            )));
        }
        let (flat, (gr, gc)) = patch_flatten(z_in, self.config.patch)?;
        Ok(linear_forward(params, &self.patch_embed, &flat, gr * gc))
    }

    /// Evaluates the network on a batch.
    pub fn forward<T: Scalar>(&self, params: &[T], inputs: &[ModelInput<'_, T>]) -> Result<Vec<Prediction<T>>> {
        self.check_params(params)?;
        let parts = par::map_chunks(self.exec, inputs, self.chunk, |_, c| self.forward_chunk(params, c, false));
        let mut out = Vec::with_capacity(inputs.len());
        for p in parts {
            out.extend(p?.0);
        }
        Ok(out)
    }

    /// Forward pass that keeps activations for [`DiT::backward`].
    pub fn forward_train<T: Scalar>(&self, params: &[T], inputs: &[ModelInput<'_, T>]) -> Result<(Vec<Prediction<T>>, Tape<T>)> {
        self.check_params(params)?;
        let parts = par::map_chunks(self.exec, inputs, self.chunk, |_, c| self.forward_chunk(params, c, true));
        let mut out = Vec::with_capacity(inputs.len());
        let mut chunks = Vec::new();
        for p in parts {
            let (preds, tape) = p?;
            out.extend(preds);
            chunks.push(tape.expect("tape requested"));
        }
        Ok((
            out,
            Tape {
                chunks,
                chunk: self.chunk,
            },
        ))
    }

    /// Gradient of `Σ_s ⟨d_out[s], prediction[s]⟩` with respect to the
    /// parameters. Chunks are reduced in order, so the result does not
    /// depend on the thread count.
    pub fn backward<T: Scalar>(&self, params: &[T], tape: Tape<T>, d_out: &[Prediction<T>]) -> Result<Vec<T>> {
        if d_out.len() != tape.len() {
            return Err(Error::Shape(format!(
                "{} output gradients for a batch of {}",
                d_out.len(),
                tape.len()
            )));
        }
        let chunk = tape.chunk;
        let indexed: Vec<(usize, ChunkTape<T>)> = tape.chunks.into_iter().enumerate().collect();
        let n = self.num_params();
        let partial = par::map_chunks(self.exec, &indexed, 1, |_, c| {
            let (i, t) = &c[0];
            let mut g = vec![T::zero(); n];
            let lo = i * chunk;
            self.backward_chunk(params, &mut g, t, &d_out[lo..lo + t.ctx.batch]);
            g
        });
        let mut grads = vec![T::zero(); n];
        for g in partial {
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        Ok(grads)
    }

    fn check_params<T>(&self, params: &[T]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::State(format!(
                "{} parameters supplied, architecture has {}",
                params.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    fn chunk_ctx<T: Scalar>(&self, inputs: &[ModelInput<'_, T>]) -> Result<ChunkCtx<T>> {
        let cfg = &self.config;
        let first = inputs.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let shape = first.z_t.shape();
        for inp in inputs {
            if !inp.z_t.same_shape(inp.z_c) {
                return Err(Error::Input(format!(
                    "noisy latent {:?} and condition latent {:?} differ in shape",
                    inp.z_t.shape(),
                    inp.z_c.shape()
                )));
            }
            if inp.z_t.shape() != shape {
                return Err(Error::Input("latents within one batch must share a shape".into()));
            }
        }
        let (c, h, w) = shape;
        if c != cfg.latent_channels {
            return Err(Error::Shape(format!("latent has {c} channels, model expects {}", cfg.latent_channels)));
        }
        if h % cfg.patch != 0 || w % cfg.patch != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("latent {h}×{w} not divisible by patch {}", cfg.patch)));
        }
        let grid = (h / cfg.patch, w / cfg.patch);
        let n_img = grid.0 * grid.1;
        let b = inputs.len();
        let mut txt_offsets = vec![0];
        let mut row_txt = Vec::new();
        let mut plans = BTreeMap::new();
        for (s, inp) in inputs.iter().enumerate() {
            let l = inp.caption.len();
            txt_offsets.push(txt_offsets[s] + l);
            row_txt.extend(std::iter::repeat_n(s, l));
            if let std::collections::btree_map::Entry::Vacant(e) = plans.entry(l) {
                e.insert(RopePlan::joint(grid.0, grid.1, l, cfg.head_dim(), cfg.rope_theta)?);
            }
        }
        let row_img = (0..b).flat_map(|s| std::iter::repeat_n(s, n_img)).collect();
        Ok(ChunkCtx {
            batch: b,
            n_img,
            grid,
            out_shape: shape,
            txt_offsets,
            row_img,
            row_txt,
            plans,
        })
    }

    #[allow(clippy::type_complexity)]
    fn forward_chunk<T: Scalar>(
        &self,
        params: &[T],
        inputs: &[ModelInput<'_, T>],
        keep: bool,
    ) -> Result<(Vec<Prediction<T>>, Option<ChunkTape<T>>)> {
        let cfg = &self.config;
        let d = cfg.hidden;
        let ctx = self.chunk_ctx(inputs)?;
        let b = ctx.batch;

        let mut patches = Vec::with_capacity(b * ctx.n_img * self.patch_embed.input());
        for inp in inputs {
            let (zt, _) = patch_flatten(inp.z_t, cfg.patch)?;
            let (zc, _) = patch_flatten(inp.z_c, cfg.patch)?;
            let per = cfg.latent_channels * cfg.patch * cfg.patch;
            for (a, c) in zt.chunks_exact(per).zip(zc.chunks_exact(per)) {
                patches.extend_from_slice(a);
                patches.extend_from_slice(c);
            }
        }
        let mut x_img = linear_forward(params, &self.patch_embed, &patches, b * ctx.n_img);

        let cond_inputs: Vec<CondInput<'_>> = inputs
            .iter()
            .map(|i| CondInput {
                time: i.time,
                caption: i.caption,
                modality: i.modality,
            })
            .collect();
        let (cond, seq, cond_cache) = self.cond.forward_batch(params, &cond_inputs)?;
        let sc = ops::silu_forward(&cond);
        let n_txt = *ctx.txt_offsets.last().expect("offsets");
        let mut x_txt = linear_forward(params, &self.text_proj, &seq, n_txt);

        let mut blocks = Vec::with_capacity(if keep { cfg.depth } else { 0 });
        for (bi, blk) in self.blocks.iter().enumerate() {
            let (xi, xt, cache) = self.block_forward_rows(params, blk, x_img, x_txt, &sc, &ctx)?;
            if !(xi.iter().all(|v| v.is_finite()) && xt.iter().all(|v| v.is_finite())) {
                return Err(Error::Numeric(format!("non-finite activations after block {bi}")));
            }
            x_img = xi;
            x_txt = xt;
            if keep {
                blocks.push(cache);
            }
        }

        let mods = linear_forward(params, &self.final_ada, &sc, b);
        let (h, rstd) = ops::layernorm_forward(&x_img, d);
        let shift = ModSlice { offset: 0, stride: 2 * d };
        let scale = ModSlice { offset: d, stride: 2 * d };
        let hm = ops::modulate_forward(&h, d, &ctx.row_img, &mods, shift, scale);
        let out = linear_forward(params, &self.final_proj, &hm, b * ctx.n_img);
        let per_tok = self.final_proj.output();
        let mut preds = Vec::with_capacity(b);
        for s in 0..b {
            let toks = &out[s * ctx.n_img * per_tok..(s + 1) * ctx.n_img * per_tok];
            let z = unpatchify(toks, ctx.grid, cfg.patch, cfg.latent_channels)?;
            debug_assert_eq!(z.shape(), ctx.out_shape);
            preds.push(z);
        }
        let tape = keep.then(|| ChunkTape {
            ctx,
            patches,
            cond_cache,
            cond,
            sc,
            seq,
            blocks,
            final_x: x_img,
            fin: FinalCache { mods, h, rstd, hm },
        });
        Ok((preds, tape))
    }

    fn stream_weights<'a>(&self, blk: &'a BlockWeights, s: Stream) -> &'a StreamWeights {
        match s {
            Stream::Image => &blk.image,
            Stream::Text => &blk.text,
        }
    }

    fn mod_slice(&self, s: Stream, which: usize) -> ModSlice {
        let d = self.config.hidden;
        let base = match s {
            Stream::Image => 0,
            Stream::Text => 6,
        };
        ModSlice {
            offset: (base + which) * d,
            stride: 12 * d,
        }
    }

    #[allow(clippy::type_complexity)]
    fn block_forward_rows<T: Scalar>(
        &self,
        params: &[T],
        blk: &BlockWeights,
        x_img: Vec<T>,
        x_txt: Vec<T>,
        sc: &[T],
        ctx: &ChunkCtx<T>,
    ) -> Result<(Vec<T>, Vec<T>, BlockCache<T>)> {
        let cfg = &self.config;
        let d = cfg.hidden;
        let mods = linear_forward(params, &blk.ada, sc, ctx.batch);

        // Pre-attention: LN → modulate → QKV, per stream.
        let pre = |x: &[T], s: Stream, rows: &[usize]| {
            let (h1, rstd1) = ops::layernorm_forward(x, d);
            let hm1 = ops::modulate_forward(
                &h1,
                d,
                rows,
                &mods,
                self.mod_slice(s, SHIFT_ATTN),
                self.mod_slice(s, SCALE_ATTN),
            );
            let qkv = linear_forward(params, &self.stream_weights(blk, s).qkv, &hm1, rows.len());
            (h1, rstd1, hm1, qkv)
        };
        let (h1_i, rstd1_i, hm1_i, qkv_i) = pre(&x_img, Stream::Image, &ctx.row_img);
        let (h1_t, rstd1_t, hm1_t, qkv_t) = pre(&x_txt, Stream::Text, &ctx.row_txt);

        // Joint attention per sample.
        let mut o_img = vec![T::zero(); x_img.len()];
        let mut o_txt = vec![T::zero(); x_txt.len()];
        let mut attn = Vec::with_capacity(ctx.batch);
        for s in 0..ctx.batch {
            let img_rows = s * ctx.n_img..(s + 1) * ctx.n_img;
            let txt_rows = ctx.txt_offsets[s]..ctx.txt_offsets[s + 1];
            let (q, k, v) = gather_qkv(&qkv_i, img_rows.clone(), &qkv_t, txt_rows.clone(), d);
            let (out, sa) = joint_attention_core(q, k, v, ctx.plan(s), cfg.heads);
            o_img[img_rows.start * d..img_rows.end * d].copy_from_slice(&out[..ctx.n_img * d]);
            o_txt[txt_rows.start * d..txt_rows.end * d].copy_from_slice(&out[ctx.n_img * d..]);
            attn.push(sa);
        }

        let post = |x_in: Vec<T>, o: Vec<T>, h1, rstd1, hm1, s: Stream, rows: &[usize]| {
            let w = self.stream_weights(blk, s);
            let n = rows.len();
            let a = linear_forward(params, &w.out, &o, n);
            let mut x_mid = x_in.clone();
            ops::gated_residual_forward(&mut x_mid, &a, d, rows, &mods, self.mod_slice(s, GATE_ATTN));
            let (h2, rstd2) = ops::layernorm_forward(&x_mid, d);
            let hm2 = ops::modulate_forward(
                &h2,
                d,
                rows,
                &mods,
                self.mod_slice(s, SHIFT_MLP),
                self.mod_slice(s, SCALE_MLP),
            );
            let m1 = linear_forward(params, &w.fc1, &hm2, n);
            let g = ops::gelu_forward(&m1);
            let m2 = linear_forward(params, &w.fc2, &g, n);
            let mut x_out = x_mid;
            ops::gated_residual_forward(&mut x_out, &m2, d, rows, &mods, self.mod_slice(s, GATE_MLP));
            let cache = StreamCache {
                rows: n,
                x_in,
                h1,
                rstd1,
                hm1,
                o,
                a,
                h2,
                rstd2,
                hm2,
                m1,
                g,
                m2,
            };
            (x_out, cache)
        };
        let (xi, ci) = post(x_img, o_img, h1_i, rstd1_i, hm1_i, Stream::Image, &ctx.row_img);
        let (xt, ct) = post(x_txt, o_txt, h1_t, rstd1_t, hm1_t, Stream::Text, &ctx.row_txt);
        Ok((
            xi,
            xt,
            BlockCache {
                mods,
                image: ci,
                text: ct,
                attn,
            },
        ))
    }

    /// One block applied to a single sample's streams.
    pub fn block_forward<T: Scalar>(
        &self,
        params: &[T],
        block: usize,
        streams: &TokenStreams<T>,
        cond: &[T],
    ) -> Result<TokenStreams<T>> {
        self.check_params(params)?;
        let d = self.config.hidden;
        let blk = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::Input(format!("block {block} out of range")))?;
        if cond.len() != d {
            return Err(Error::Config(format!("conditioning has {} dims, model width {d}", cond.len())));
        }
        let (gr, gc) = streams.grid;
        let n = gr * gc;
        if streams.image.len() != n * d || streams.text.len() % d != 0 {
            return Err(Error::Shape("token streams do not match grid and width".into()));
        }
        let l = streams.text.len() / d;
        let mut plans = BTreeMap::new();
        plans.insert(l, RopePlan::joint(gr, gc, l, self.config.head_dim(), self.config.rope_theta)?);
        let ctx = ChunkCtx {
            batch: 1,
            n_img: n,
            grid: streams.grid,
            out_shape: (0, 0, 0),
            txt_offsets: vec![0, l],
            row_img: vec![0; n],
            row_txt: vec![0; l],
            plans,
        };
        let sc = ops::silu_forward(cond);
        let (image, text, _) = self.block_forward_rows(params, blk, streams.image.clone(), streams.text.clone(), &sc, &ctx)?;
        if !(image.iter().all(|v| v.is_finite()) && text.iter().all(|v| v.is_finite())) {
            return Err(Error::Numeric(format!("non-finite activations after block {block}")));
        }
        Ok(TokenStreams {
            image,
            text,
            grid: streams.grid,
        })
    }

    fn backward_chunk<T: Scalar>(&self, params: &[T], grads: &mut [T], tape: &ChunkTape<T>, d_out: &[Prediction<T>]) {
        let cfg = &self.config;
        let d = cfg.hidden;
        let ctx = &tape.ctx;
        let b = ctx.batch;
        let n_rows = b * ctx.n_img;

        let mut d_tok = Vec::with_capacity(n_rows * self.final_proj.output());
        for z in d_out {
            let (flat, _) = patch_flatten(z, cfg.patch).expect("prediction shape");
            d_tok.extend(flat);
        }
        let d_hm = linear_backward(params, grads, &self.final_proj, &tape.fin.hm, &d_tok, n_rows, true).expect("dx");
        let mut d_fmods = vec![T::zero(); b * 2 * d];
        let shift = ModSlice { offset: 0, stride: 2 * d };
        let scale = ModSlice { offset: d, stride: 2 * d };
        let d_h = ops::modulate_backward(&tape.fin.h, &d_hm, d, &ctx.row_img, &tape.fin.mods, &mut d_fmods, shift, scale);
        let mut d_img = ops::layernorm_backward(&tape.fin.h, &tape.fin.rstd, &d_h, d);
        let mut d_sc = linear_backward(params, grads, &self.final_ada, &tape.sc, &d_fmods, b, true).expect("dx");
        let _ = &tape.final_x;

        let n_txt = *ctx.txt_offsets.last().expect("offsets");
        let mut d_txt = vec![T::zero(); n_txt * d];
        for (blk, cache) in self.blocks.iter().zip(&tape.blocks).rev() {
            let (di, dt, dsc) = self.block_backward(params, grads, blk, cache, ctx, &tape.sc, d_img, d_txt);
            d_img = di;
            d_txt = dt;
            for (a, v) in d_sc.iter_mut().zip(&dsc) {
                *a += *v;
            }
        }

        let d_seq = linear_backward(params, grads, &self.text_proj, &tape.seq, &d_txt, n_txt, true).expect("dx");
        linear_backward(params, grads, &self.patch_embed, &tape.patches, &d_img, n_rows, false);
        let d_cond = ops::silu_backward(&tape.cond, &d_sc);
        self.cond.backward_batch(params, grads, &tape.cond_cache, &d_cond, &d_seq);
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward<T: Scalar>(
        &self,
        params: &[T],
        grads: &mut [T],
        blk: &BlockWeights,
        cache: &BlockCache<T>,
        ctx: &ChunkCtx<T>,
        sc: &[T],
        d_img: Vec<T>,
        d_txt: Vec<T>,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let d = self.config.hidden;
        let mods = &cache.mods;
        let mut d_mods = vec![T::zero(); ctx.batch * 12 * d];

        // MLP and output projection, per stream. Returns (d_x so far, d_o).
        let mut post_back = |grads: &mut [T], dy: Vec<T>, c: &StreamCache<T>, s: Stream, rows: &[usize]| {
            let w = self.stream_weights(blk, s);
            let n = c.rows;
            let d_m2 = ops::gated_residual_backward(&c.m2, &dy, d, rows, mods, &mut d_mods, self.mod_slice(s, GATE_MLP));
            let d_g = linear_backward(params, grads, &w.fc2, &c.g, &d_m2, n, true).expect("dx");
            let d_m1 = ops::gelu_backward(&c.m1, &d_g);
            let d_hm2 = linear_backward(params, grads, &w.fc1, &c.hm2, &d_m1, n, true).expect("dx");
            let d_h2 = ops::modulate_backward(
                &c.h2,
                &d_hm2,
                d,
                rows,
                mods,
                &mut d_mods,
                self.mod_slice(s, SHIFT_MLP),
                self.mod_slice(s, SCALE_MLP),
            );
            let mut d_mid = dy;
            for (a, v) in d_mid.iter_mut().zip(ops::layernorm_backward(&c.h2, &c.rstd2, &d_h2, d)) {
                *a += v;
            }
            let d_a = ops::gated_residual_backward(&c.a, &d_mid, d, rows, mods, &mut d_mods, self.mod_slice(s, GATE_ATTN));
            let d_o = linear_backward(params, grads, &w.out, &c.o, &d_a, n, true).expect("dx");
            (d_mid, d_o)
        };
        let (mut dx_img, d_o_img) = post_back(grads, d_img, &cache.image, Stream::Image, &ctx.row_img);
        let (mut dx_txt, d_o_txt) = post_back(grads, d_txt, &cache.text, Stream::Text, &ctx.row_txt);

        // Attention.
        let mut d_qkv_i = vec![T::zero(); cache.image.rows * 3 * d];
        let mut d_qkv_t = vec![T::zero(); cache.text.rows * 3 * d];
        for (s, sa) in cache.attn.iter().enumerate() {
            let img_rows = s * ctx.n_img..(s + 1) * ctx.n_img;
            let txt_rows = ctx.txt_offsets[s]..ctx.txt_offsets[s + 1];
            let tokens = img_rows.len() + txt_rows.len();
            let mut d_out = Vec::with_capacity(tokens * d);
            d_out.extend_from_slice(&d_o_img[img_rows.start * d..img_rows.end * d]);
            d_out.extend_from_slice(&d_o_txt[txt_rows.start * d..txt_rows.end * d]);
            let hd = self.config.head_dim();
            let (mut dq, mut dk, dv) =
                ops::attention_backward(&sa.q, &sa.k, &sa.v, &sa.probs, &d_out, tokens, self.config.heads, hd);
            let plan = ctx.plan(s);
            plan.rotate(&mut dq, d, self.config.heads, true);
            plan.rotate(&mut dk, d, self.config.heads, true);
            let scatter = |dst: &mut [T], r: usize, t: usize| {
                let row = &mut dst[r * 3 * d..(r + 1) * 3 * d];
                row[..d].copy_from_slice(&dq[t * d..(t + 1) * d]);
                row[d..2 * d].copy_from_slice(&dk[t * d..(t + 1) * d]);
                row[2 * d..].copy_from_slice(&dv[t * d..(t + 1) * d]);
            };
            for (t, r) in img_rows.enumerate() {
                scatter(&mut d_qkv_i, r, t);
            }
            for (t, r) in txt_rows.enumerate() {
                scatter(&mut d_qkv_t, r, ctx.n_img + t);
            }
        }

        let mut pre_back = |grads: &mut [T], d_qkv: &[T], c: &StreamCache<T>, s: Stream, rows: &[usize], dx: &mut [T]| {
            let w = self.stream_weights(blk, s);
            let d_hm1 = linear_backward(params, grads, &w.qkv, &c.hm1, d_qkv, c.rows, true).expect("dx");
            let d_h1 = ops::modulate_backward(
                &c.h1,
                &d_hm1,
                d,
                rows,
                mods,
                &mut d_mods,
                self.mod_slice(s, SHIFT_ATTN),
                self.mod_slice(s, SCALE_ATTN),
            );
            for (a, v) in dx.iter_mut().zip(ops::layernorm_backward(&c.h1, &c.rstd1, &d_h1, d)) {
                *a += v;
            }
            let _ = &c.x_in;
        };
        pre_back(grads, &d_qkv_i, &cache.image, Stream::Image, &ctx.row_img, &mut dx_img);
        pre_back(grads, &d_qkv_t, &cache.text, Stream::Text, &ctx.row_txt, &mut dx_txt);

        let d_sc = linear_backward(params, grads, &blk.ada, sc, &d_mods, ctx.batch, true).expect("dx");
        (dx_img, dx_txt, d_sc)
    }
}

/// Assembles `[image; text]` Q, K, V rows of one sample from the per-stream
/// `(rows, 3D)` projections.
fn gather_qkv<T: Scalar>(
    qkv_i: &[T],
    img_rows: std::ops::Range<usize>,
    qkv_t: &[T],
    txt_rows: std::ops::Range<usize>,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let tokens = img_rows.len() + txt_rows.len();
    let mut q = Vec::with_capacity(tokens * d);
    let mut k = Vec::with_capacity(tokens * d);
    let mut v = Vec::with_capacity(tokens * d);
    let rows = img_rows
        .map(|r| &qkv_i[r * 3 * d..(r + 1) * 3 * d])
        .chain(txt_rows.map(|r| &qkv_t[r * 3 * d..(r + 1) * 3 * d]));
    for row in rows {
        q.extend_from_slice(&row[..d]);
        k.extend_from_slice(&row[d..2 * d]);
        v.extend_from_slice(&row[2 * d..]);
    }
    (q, k, v)
}

fn joint_attention_core<T: Scalar>(
    mut q: Vec<T>,
    mut k: Vec<T>,
    v: Vec<T>,
    plan: &RopePlan<T>,
    heads: usize,
) -> (Vec<T>, SampleAttn<T>) {
    let d = q.len() / plan.tokens;
    plan.rotate(&mut q, d, heads, false);
    plan.rotate(&mut k, d, heads, false);
    let (out, probs) = ops::attention_forward(&q, &k, &v, plan.tokens, heads, plan.head_dim);
    (out, SampleAttn { q, k, v, probs })
}

/// Shared attention of one sample: rotates queries and keys of the
/// concatenated `[image; text]` sequence by `plan` and runs one softmax
/// attention over all tokens. Returns the output split back into
/// `(image, text)` rows and the attention probabilities `(heads, T, T)`.
#[allow(clippy::type_complexity)]
pub fn joint_attention<T: Scalar>(
    image_qkv: (&[T], &[T], &[T]),
    text_qkv: (&[T], &[T], &[T]),
    plan: &RopePlan<T>,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cat = |a: &[T], b: &[T]| [a, b].concat();
    let d = heads * plan.head_dim;
    let n_img = image_qkv.0.len() / d;
    let (out, sa) = joint_attention_core(
        cat(image_qkv.0, text_qkv.0),
        cat(image_qkv.1, text_qkv.1),
        cat(image_qkv.2, text_qkv.2),
        plan,
        heads,
    );
    (out[..n_img * d].to_vec(), out[n_img * d..].to_vec(), sa.probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(c: usize, h: usize, w: usize, k: f64) -> Planar<f64> {
        Planar::from_vec(c, h, w, (0..c * h * w).map(|i| ((i as f64 + k) * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn patch_layout_roundtrip_and_grid() {
        let z = latent(3, 4, 6, 0.0);
        let (flat, grid) = patch_flatten(&z, 2).unwrap();
        assert_eq!(grid, (2, 3));
        assert_eq!(unpatchify(&flat, grid, 2, 3).unwrap(), z);
        // first token: channel 0 rows 0..2 cols 0..2
        assert_eq!(&flat[..4], &[z.at(0, 0, 0), z.at(0, 0, 1), z.at(0, 1, 0), z.at(0, 1, 1)]);
        assert!(matches!(patch_flatten(&latent(3, 5, 4, 0.0), 2), Err(Error::Shape(_))));
        assert!(matches!(unpatchify(&flat[1..], grid, 2, 3), Err(Error::Shape(_))));
        let single = unpatchify(&[1.0, 2.0, 3.0], (1, 1), 1, 3).unwrap();
        assert_eq!(single.shape(), (3, 1, 1));
    }

    #[test]
    fn tiny_count_matches_layout() {
        let cfg = ModelConfig::tiny();
        let model = DiT::new(cfg.clone()).unwrap();
        let enumerated: usize = model.layout.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        assert_eq!(enumerated as u64, count_parameters(&cfg));
        assert_eq!(block_parameters(&cfg), 36 * 16 * 16 + 30 * 16);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(DiT::new(c).is_err());
        let mut c = ModelConfig::tiny();
        c.hidden = 24;
        c.heads = 4; // head dim 6
        assert!(DiT::new(c).is_err());
    }

    #[test]
    fn fresh_model_predicts_zero_with_input_shape() {
        let model = DiT::new(ModelConfig::tiny()).unwrap();
        let p: Vec<f64> = model.init_params();
        let (zt, zc) = (latent(3, 8, 4, 1.0), latent(3, 8, 4, 2.0));
        let out = model
            .forward(
                &p,
                &[ModelInput {
                    z_t: &zt,
                    z_c: &zc,
                    time: TimeInput::Discrete(3),
                    caption: &[1, 2],
                    modality: Modality::Sketch,
                }],
            )
            .unwrap();
        assert_eq!(out[0].shape(), (3, 8, 4));
        assert!(out[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_condition_is_rejected() {
        let model = DiT::new(ModelConfig::tiny()).unwrap();
        let p: Vec<f64> = model.init_params();
        let (zt, zc) = (latent(3, 8, 8, 1.0), latent(3, 4, 4, 2.0));
        let r = model.forward(
            &p,
            &[ModelInput {
                z_t: &zt,
                z_c: &zc,
                time: TimeInput::Discrete(3),
                caption: &[1],
                modality: Modality::Mask,
            }],
        );
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
