//! Flat parameter layout.
//!
//! All learnable scalars of a model live in one contiguous buffer; layers
//! hold [`Slot`]s (offset + shape) into it. Optimizer state, EMA weights and
//! gradients are buffers of the same length, so those algorithms are plain
//! elementwise loops.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, Stream};
use crate::scalar::View;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    #[inline]
    pub fn get<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.range()]
    }

    #[inline]
    pub fn get_mut<'a, T>(&self, params: &'a mut [T]) -> &'a mut [T] {
        &mut params[self.range()]
    }

    pub fn view<'a, T: Scalar>(&self, params: &'a [T]) -> View<'a, T> {
        View::new(self.get(params), self.rows, self.cols)
    }

    /// Row `r` of a matrix slot.
    pub fn row<'a, T>(&self, params: &'a [T], r: usize) -> &'a [T] {
        &params[self.offset + r * self.cols..self.offset + (r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    /// Normal with the given standard deviation, truncated at ±2σ.
    TruncNormal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    pub init: Init,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Layout {
    pub entries: Vec<ParamSpec>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a `rows × cols` tensor (`rows = 1` for vectors).
    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, decay: bool, init: Init) -> Slot {
        let slot = Slot {
            offset: self.total,
            rows,
            cols,
        };
        let shape = if rows == 1 { vec![cols] } else { vec![rows, cols] };
        self.entries.push(ParamSpec {
            name: name.into(),
            shape,
            slot,
            decay,
            init,
        });
        self.total += rows * cols;
        slot
    }

    /// Total number of learnable scalars.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Fresh parameters drawn per tensor from streams keyed on `(seed, tensor index)`.
    pub fn init<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut out = vec![T::zero(); self.total];
        for (i, e) in self.entries.iter().enumerate() {
            if let Init::TruncNormal(std) = e.init {
                let mut r = rng::keyed(seed, Stream::Init, i as u64, 0);
                for v in e.slot.get_mut(&mut out) {
                    *v = T::lit(std * truncated_normal(&mut r));
                }
            }
        }
        out
    }

    /// Per-scalar decay flags.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for e in &self.entries {
            m[e.slot.range()].fill(e.decay);
        }
        m
    }
}

fn truncated_normal<R: Rng>(r: &mut R) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(r);
        if x.abs() <= 2.0 {
            return x;
        }
    }
}

/// Affine map `y = x W + b` with `W` stored `(input, output)` row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Slot,
    pub b: Slot,
}

impl Linear {
    pub fn new(layout: &mut Layout, name: &str, input: usize, output: usize, init: Init, decay: bool) -> Self {
        let w = layout.add(format!("{name}.weight"), input, output, decay, init);
        let b = layout.add(format!("{name}.bias"), 1, output, false, Init::Zeros);
        Linear { w, b }
    }

    pub fn input(&self) -> usize {
        self.w.rows
    }

    pub fn output(&self) -> usize {
        self.w.cols
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}
