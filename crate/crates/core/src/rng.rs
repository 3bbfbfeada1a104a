//! Counter-keyed random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed on a
//! tuple such as `(seed, step, sample_index)`, which makes draws independent
//! of evaluation order and replayable from the tuple alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Separates the uses of a seed so streams never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Scene = 1,
    Init = 2,
    Batch = 3,
    Epoch = 4,
    Sampler = 5,
    Dropout = 6,
    Eval = 7,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A generator keyed on `(seed, stream, a, b)`.
pub fn keyed(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix(seed);
    for (i, word) in [stream as u64, a, b, 0x6464_6974].into_iter().enumerate() {
        h = splitmix(h ^ word.wrapping_mul(0xA24B_AED4_963E_E407));
        key[i * 8..i * 8 + 8].copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

pub fn normal_vec<T: crate::Scalar, R: rand::Rng>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            T::lit(x)
        })
        .collect()
}
