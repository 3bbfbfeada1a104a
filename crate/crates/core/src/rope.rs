//! Rotary position embeddings: 1D sequential for text tokens and 2D axial
//! for image patch tokens.
//!
//! A head vector is treated as consecutive pairs `(x[2i], x[2i+1])`, each
//! rotated by `position · frequency[i]`. The axial variant rotates the first
//! half of the head by the row index and the second half by the column
//! index, each half with its own 1D table over `head_dim / 2` dimensions.

use crate::{Error, Result, Scalar};

pub const DEFAULT_BASE: f64 = 10_000.0;

/// Inverse wavelengths `base^(-2i / d_rot)` for `i < d_rot / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    pub base: f64,
    pub d_rot: usize,
    pub frequencies: Vec<f64>,
}

impl RopeTable {
    pub fn new(d_rot: usize, base: f64) -> Result<Self> {
        if d_rot == 0 || d_rot % 2 != 0 {
            return Err(Error::Config(format!("rotary dimension must be even and positive, got {d_rot}")));
        }
        if !(base > 1.0) {
            return Err(Error::Config(format!("rotary base must exceed 1, got {base}")));
        }
        let frequencies = (0..d_rot / 2)
            .map(|i| base.powf(-2.0 * i as f64 / d_rot as f64))
            .collect();
        Ok(RopeTable {
            base,
            d_rot,
            frequencies,
        })
    }
}

/// Per-token positions of one modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenPositions {
    Seq1d(Vec<usize>),
    Grid2d { rows: usize, cols: usize, indices: Vec<(usize, usize)> },
}

impl TokenPositions {
    /// Positions `0..len`.
    pub fn sequence(len: usize) -> Self {
        TokenPositions::Seq1d((0..len).collect())
    }

    /// Row-major positions of a `rows × cols` patch grid.
    pub fn grid(rows: usize, cols: usize) -> Self {
        let indices = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        TokenPositions::Grid2d { rows, cols, indices }
    }

    pub fn len(&self) -> usize {
        match self {
            TokenPositions::Seq1d(p) => p.len(),
            TokenPositions::Grid2d { indices, .. } => indices.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[inline]
fn rotate_pair<T: Scalar>(x: &mut [T], i: usize, cos: T, sin: T) {
    let (a, b) = (x[2 * i], x[2 * i + 1]);
    x[2 * i] = a * cos - b * sin;
    x[2 * i + 1] = a * sin + b * cos;
}

fn rotate_1d_in_place<T: Scalar>(x: &mut [T], pos: f64, table: &RopeTable) {
    for (i, f) in table.frequencies.iter().enumerate() {
        let (s, c) = (pos * f).sin_cos();
        rotate_pair(x, i, T::lit(c), T::lit(s));
    }
}

fn check_rows<T>(x: &[T], head_dim: usize, n: usize) -> Result<()> {
    if x.len() != head_dim * n {
        return Err(Error::Shape(format!(
            "{} values for {n} vectors of dimension {head_dim}",
            x.len()
        )));
    }
    Ok(())
}

/// Rotates each `head_dim`-vector of `x` by its scalar position.
pub fn apply_rope_1d<T: Scalar>(x: &[T], head_dim: usize, positions: &[usize], table: &RopeTable) -> Result<Vec<T>> {
    if head_dim % 2 != 0 {
        return Err(Error::Config(format!("head dimension {head_dim} is odd")));
    }
    if table.d_rot != head_dim {
        return Err(Error::Config(format!(
            "table rotates {} dims, head has {head_dim}",
            table.d_rot
        )));
    }
    check_rows(x, head_dim, positions.len())?;
    let mut out = x.to_vec();
    for (row, &p) in out.chunks_exact_mut(head_dim).zip(positions) {
        rotate_1d_in_place(row, p as f64, table);
    }
    Ok(out)
}

/// Rotates the first half of each vector by its row index and the second
/// half by its column index. `table` covers one axis (`head_dim / 2`).
pub fn apply_rope_2d<T: Scalar>(
    x: &[T],
    head_dim: usize,
    positions: &[(usize, usize)],
    table: &RopeTable,
) -> Result<Vec<T>> {
    if head_dim % 4 != 0 {
        return Err(Error::Config(format!("head dimension {head_dim} is not divisible by 4")));
    }
    if table.d_rot != head_dim / 2 {
        return Err(Error::Config(format!(
            "axial table rotates {} dims, expected {}",
            table.d_rot,
            head_dim / 2
        )));
    }
    check_rows(x, head_dim, positions.len())?;
    let half = head_dim / 2;
    let mut out = x.to_vec();
    for (row, &(r, c)) in out.chunks_exact_mut(head_dim).zip(positions) {
        let (rows_half, cols_half) = row.split_at_mut(half);
        rotate_1d_in_place(rows_half, r as f64, table);
        rotate_1d_in_place(cols_half, c as f64, table);
    }
    Ok(out)
}

/// Precomputed rotation angles for a joint `[image; text]` token sequence,
/// shared by every head.
#[derive(Debug, Clone)]
pub struct RopePlan<T> {
    pub head_dim: usize,
    pub tokens: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopePlan<T> {
    /// Image tokens (row-major over `rows × cols`, axial) followed by
    /// `text_len` text tokens at positions `0..text_len`.
    pub fn joint(rows: usize, cols: usize, text_len: usize, head_dim: usize, base: f64) -> Result<Self> {
        if head_dim % 4 != 0 {
            return Err(Error::Config(format!("head dimension {head_dim} is not divisible by 4")));
        }
        let axial = RopeTable::new(head_dim / 2, base)?;
        let seq = RopeTable::new(head_dim, base)?;
        let pairs = head_dim / 2;
        let tokens = rows * cols + text_len;
        let mut cos = Vec::with_capacity(tokens * pairs);
        let mut sin = Vec::with_capacity(tokens * pairs);
        let mut push = |angle: f64| {
            let (s, c) = angle.sin_cos();
            cos.push(T::lit(c));
            sin.push(T::lit(s));
        };
        for r in 0..rows {
            for c in 0..cols {
                for f in &axial.frequencies {
                    push(r as f64 * f);
                }
                for f in &axial.frequencies {
                    push(c as f64 * f);
                }
            }
        }
        for p in 0..text_len {
            for f in &seq.frequencies {
                push(p as f64 * f);
            }
        }
        Ok(RopePlan {
            head_dim,
            tokens,
            cos,
            sin,
        })
    }

    /// Rotates token `t` of every head in a `(tokens, heads·head_dim)` matrix
    /// with row stride `stride`. `inverse` rotates by the negated angles,
    /// which is the transpose used in backpropagation.
    pub fn rotate(&self, x: &mut [T], stride: usize, heads: usize, inverse: bool) {
        let pairs = self.head_dim / 2;
        for t in 0..self.tokens {
            let cos = &self.cos[t * pairs..(t + 1) * pairs];
            let sin = &self.sin[t * pairs..(t + 1) * pairs];
            for h in 0..heads {
                let v = &mut x[t * stride + h * self.head_dim..t * stride + (h + 1) * self.head_dim];
                for i in 0..pairs {
                    let s = if inverse { -sin[i] } else { sin[i] };
                    rotate_pair(v, i, cos[i], s);
                }
            }
        }
    }
}
