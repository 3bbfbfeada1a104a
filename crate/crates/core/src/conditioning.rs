//! Non-token conditioning: timestep embedding, the toy caption encoder, the
//! modality embedder, and their sum, the global conditioning vector that
//! drives every adaptive layer norm.

use serde::{Deserialize, Serialize};

use crate::nn::ops::{self, linear_backward, linear_forward};
use crate::nn::{Init, Layout, Linear, Slot};
use crate::{Error, Result, Scalar};

/// Multiplier applied to continuous flow-matching time before the
/// sinusoidal embedding, so both objectives span the same range.
pub const TIME_SCALE: f64 = 1000.0;

const INIT_STD: f64 = 0.02;

/// Kind of spatial condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Mask = 0,
    Sketch = 1,
}

impl Modality {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Modality::Mask),
            1 => Ok(Modality::Sketch),
            _ => Err(Error::Input(format!("modality flag {i} is not 0 (mask) or 1 (sketch)"))),
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(Modality::Mask),
            "sketch" => Ok(Modality::Sketch),
            _ => Err(Error::Input(format!("unknown modality {s:?}"))),
        }
    }
}

/// Diffusion time in either parameterization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeInput {
    /// DDPM step in `1..=T`.
    Discrete(usize),
    /// Flow-matching time in `[0, 1]`.
    Continuous(f64),
}

impl TimeInput {
    /// Value fed to the sinusoidal features.
    pub fn embed_value(self) -> f64 {
        match self {
            TimeInput::Discrete(t) => t as f64,
            TimeInput::Continuous(t) => t * TIME_SCALE,
        }
    }
}

/// `[sin(t·f_0) .. sin(t·f_{n-1}), cos(t·f_0) .. cos(t·f_{n-1})]` with
/// `f_i = 10000^(-2i/dim)` and `n = dim / 2`.
pub fn sinusoidal_features(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("timestep feature dimension must be even, got {dim}")));
    }
    if !(t >= 0.0) {
        return Err(Error::Input(format!("timestep must be non-negative, got {t}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = 10_000f64.powf(-2.0 * i as f64 / dim as f64);
        let (s, c) = (t * f).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    Ok(out)
}

/// Sequence and pooled embedding of one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionEncoding<T> {
    /// `length × dim`, row-major.
    pub sequence: Vec<T>,
    pub pooled: Vec<T>,
    pub length: usize,
    pub dim: usize,
}

impl<T: Scalar> CaptionEncoding<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.sequence[i * self.dim..(i + 1) * self.dim]
    }
}

/// `C_global` with its three addends kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalConditioning<T> {
    pub vector: Vec<T>,
    pub timestep: Vec<T>,
    pub caption: Vec<T>,
    pub modality: Vec<T>,
}

/// All conditioning parameters of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioner {
    pub hidden: usize,
    pub text_dim: usize,
    pub freq_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub token_table: Slot,
    pub pos_table: Slot,
    pub pool_proj: Linear,
    pub caption_fc1: Linear,
    pub caption_fc2: Linear,
    pub modality_table: Slot,
}

/// Per-batch conditioning inputs.
#[derive(Debug, Clone, Copy)]
pub struct CondInput<'a> {
    pub time: TimeInput,
    pub caption: &'a [u32],
    pub modality: Modality,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct CondCache<T> {
    batch: usize,
    feats: Vec<T>,
    time_h: Vec<T>,
    time_a: Vec<T>,
    tokens: Vec<usize>,
    positions: Vec<usize>,
    offsets: Vec<usize>,
    cap_mean: Vec<T>,
    pooled: Vec<T>,
    cap_h: Vec<T>,
    cap_a: Vec<T>,
    modalities: Vec<usize>,
}

impl<T> CondCache<T> {
    /// Row offsets of each sample's caption in the stacked sequence.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

impl Conditioner {
    pub fn new(
        layout: &mut Layout,
        hidden: usize,
        text_dim: usize,
        freq_dim: usize,
        vocab: usize,
        max_len: usize,
        modalities: usize,
    ) -> Self {
        let w = Init::TruncNormal(INIT_STD);
        Conditioner {
            hidden,
            text_dim,
            freq_dim,
            vocab,
            max_len,
            time_fc1: Linear::new(layout, "time_embed.fc1", freq_dim, hidden, w, true),
            time_fc2: Linear::new(layout, "time_embed.fc2", hidden, hidden, w, true),
            token_table: layout.add("caption.token_table", vocab, text_dim, false, w),
            pos_table: layout.add("caption.pos_table", max_len, text_dim, false, w),
            pool_proj: Linear::new(layout, "caption.pool_proj", text_dim, text_dim, w, true),
            caption_fc1: Linear::new(layout, "caption_embed.fc1", text_dim, hidden, w, true),
            caption_fc2: Linear::new(layout, "caption_embed.fc2", hidden, hidden, w, true),
            modality_table: layout.add("modality_embed.table", modalities, hidden, false, w),
        }
    }

    pub fn validate_caption(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("caption has no tokens; use the null token".into()));
        }
        if tokens.len() > self.max_len {
            return Err(Error::Input(format!(
                "caption length {} exceeds maximum {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::Input(format!("token id {t} outside vocabulary of {}", self.vocab)));
        }
        Ok(())
    }

    fn validate_modality(&self, m: Modality) -> Result<()> {
        if m.index() >= self.modality_table.rows {
            return Err(Error::Input(format!("modality {m:?} outside table")));
        }
        Ok(())
    }

    /// `E_time(t)`: sinusoidal features through a two-layer SiLU perceptron.
    pub fn embed_timestep<T: Scalar>(&self, params: &[T], time: TimeInput) -> Result<Vec<T>> {
        let feats: Vec<T> = sinusoidal_features(time.embed_value(), self.freq_dim)?
            .into_iter()
            .map(T::lit)
            .collect();
        let h = linear_forward(params, &self.time_fc1, &feats, 1);
        Ok(linear_forward(params, &self.time_fc2, &ops::silu_forward(&h), 1))
    }

    /// Token lookup plus learned positions; pooled = projection of the row mean.
    pub fn encode_caption<T: Scalar>(&self, params: &[T], tokens: &[u32]) -> Result<CaptionEncoding<T>> {
        self.validate_caption(tokens)?;
        let (l, d) = (tokens.len(), self.text_dim);
        let mut sequence = vec![T::zero(); l * d];
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..l).collect();
        ops::gather_rows(params, self.token_table, &idx, &mut sequence);
        ops::gather_rows(params, self.pos_table, &pos, &mut sequence);
        let mean = row_mean(&sequence, l, d);
        let pooled = linear_forward(params, &self.pool_proj, &mean, 1);
        Ok(CaptionEncoding {
            sequence,
            pooled,
            length: l,
            dim: d,
        })
    }

    /// Row `m` of the modality table.
    pub fn embed_modality<T: Scalar>(&self, params: &[T], m: Modality) -> Result<Vec<T>> {
        self.validate_modality(m)?;
        Ok(self.modality_table.row(params, m.index()).to_vec())
    }

    /// `E_caption(c_pooled)`: two-layer SiLU perceptron from `text_dim` to `hidden`.
    pub fn project_caption<T: Scalar>(&self, params: &[T], pooled: &[T]) -> Result<Vec<T>> {
        if pooled.len() != self.text_dim {
            return Err(Error::Config(format!(
                "pooled caption has {} dims, encoder expects {}",
                pooled.len(),
                self.text_dim
            )));
        }
        let h = linear_forward(params, &self.caption_fc1, pooled, 1);
        Ok(linear_forward(params, &self.caption_fc2, &ops::silu_forward(&h), 1))
    }

    pub fn global_conditioning<T: Scalar>(
        &self,
        params: &[T],
        time: TimeInput,
        caption: &CaptionEncoding<T>,
        m: Modality,
    ) -> Result<GlobalConditioning<T>> {
        let timestep = self.embed_timestep(params, time)?;
        let caption = self.project_caption(params, &caption.pooled)?;
        let modality = self.embed_modality(params, m)?;
        Ok(sum_conditioning(timestep, caption, modality))
    }

    /// Batched forward: returns `(C_global (B×D), stacked caption sequences (ΣL×text_dim), cache)`.
    pub fn forward_batch<T: Scalar>(&self, params: &[T], inputs: &[CondInput<'_>]) -> Result<(Vec<T>, Vec<T>, CondCache<T>)> {
        let b = inputs.len();
        let (d, dt) = (self.hidden, self.text_dim);
        let mut feats = Vec::with_capacity(b * self.freq_dim);
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut offsets = Vec::with_capacity(b + 1);
        let mut modalities = Vec::with_capacity(b);
        offsets.push(0);
        for inp in inputs {
            self.validate_caption(inp.caption)?;
            self.validate_modality(inp.modality)?;
            feats.extend(sinusoidal_features(inp.time.embed_value(), self.freq_dim)?.into_iter().map(T::lit));
            tokens.extend(inp.caption.iter().map(|&t| t as usize));
            positions.extend(0..inp.caption.len());
            offsets.push(tokens.len());
            modalities.push(inp.modality.index());
        }

        let time_h = linear_forward(params, &self.time_fc1, &feats, b);
        let time_a = ops::silu_forward(&time_h);
        let mut cond = linear_forward(params, &self.time_fc2, &time_a, b);

        let mut seq = vec![T::zero(); tokens.len() * dt];
        ops::gather_rows(params, self.token_table, &tokens, &mut seq);
        ops::gather_rows(params, self.pos_table, &positions, &mut seq);
        let mut cap_mean = Vec::with_capacity(b * dt);
        for s in 0..b {
            let rows = &seq[offsets[s] * dt..offsets[s + 1] * dt];
            cap_mean.extend(row_mean(rows, offsets[s + 1] - offsets[s], dt));
        }
        let pooled = linear_forward(params, &self.pool_proj, &cap_mean, b);
        let cap_h = linear_forward(params, &self.caption_fc1, &pooled, b);
        let cap_a = ops::silu_forward(&cap_h);
        let cap = linear_forward(params, &self.caption_fc2, &cap_a, b);
        for (c, v) in cond.iter_mut().zip(&cap) {
            *c += *v;
        }
        for (s, &m) in modalities.iter().enumerate() {
            for (c, &v) in cond[s * d..(s + 1) * d].iter_mut().zip(self.modality_table.row(params, m)) {
                *c += v;
            }
        }
        let cache = CondCache {
            batch: b,
            feats,
            time_h,
            time_a,
            tokens,
            positions,
            offsets,
            cap_mean,
            pooled,
            cap_h,
            cap_a,
            modalities,
        };
        Ok((cond, seq, cache))
    }

    /// Accumulates parameter gradients given `dC_global` and the gradient of
    /// the stacked caption sequence.
    pub fn backward_batch<T: Scalar>(&self, params: &[T], grads: &mut [T], cache: &CondCache<T>, d_cond: &[T], d_seq: &[T]) {
        let b = cache.batch;
        let (d, dt) = (self.hidden, self.text_dim);
        // time path
        let d_ta = linear_backward(params, grads, &self.time_fc2, &cache.time_a, d_cond, b, true).expect("dx");
        let d_th = ops::silu_backward(&cache.time_h, &d_ta);
        linear_backward(params, grads, &self.time_fc1, &cache.feats, &d_th, b, false);
        // modality rows
        for (s, &m) in cache.modalities.iter().enumerate() {
            let g = &mut grads[self.modality_table.offset + m * d..self.modality_table.offset + (m + 1) * d];
            for (x, &v) in g.iter_mut().zip(&d_cond[s * d..(s + 1) * d]) {
                *x += v;
            }
        }
        // caption path
        let d_ca = linear_backward(params, grads, &self.caption_fc2, &cache.cap_a, d_cond, b, true).expect("dx");
        let d_ch = ops::silu_backward(&cache.cap_h, &d_ca);
        let d_pooled = linear_backward(params, grads, &self.caption_fc1, &cache.pooled, &d_ch, b, true).expect("dx");
        let d_mean = linear_backward(params, grads, &self.pool_proj, &cache.cap_mean, &d_pooled, b, true).expect("dx");
        let mut d_rows = d_seq.to_vec();
        for s in 0..b {
            let (lo, hi) = (cache.offsets[s], cache.offsets[s + 1]);
            let inv = T::one() / T::lit((hi - lo) as f64);
            for r in lo..hi {
                for j in 0..dt {
                    d_rows[r * dt + j] += d_mean[s * dt + j] * inv;
                }
            }
        }
        ops::scatter_rows(grads, self.token_table, &cache.tokens, &d_rows);
        ops::scatter_rows(grads, self.pos_table, &cache.positions, &d_rows);
    }
}

pub fn sum_conditioning<T: Scalar>(timestep: Vec<T>, caption: Vec<T>, modality: Vec<T>) -> GlobalConditioning<T> {
    let vector = timestep
        .iter()
        .zip(&caption)
        .zip(&modality)
        .map(|((&a, &b), &c)| a + b + c)
        .collect();
    GlobalConditioning {
        vector,
        timestep,
        caption,
        modality,
    }
}

fn row_mean<T: Scalar>(rows: &[T], n: usize, d: usize) -> Vec<T> {
    let mut mean = vec![T::zero(); d];
    for r in rows.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let inv = T::one() / T::lit(n as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}
