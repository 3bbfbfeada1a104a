//! Exactly invertible latent codec: identity ("pixel") or a multi-level
//! orthonormal Haar packet transform.
//!
//! Each Haar level maps every 2×2 spatial block of every channel to four
//! subband coefficients, so `levels` levels turn a `3×H×W` image into a
//! `3·4^levels × H/2^levels × W/2^levels` latent.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::raster::Planar;
use crate::{Error, Result, Scalar};

/// Latent `(channels, height, width)` tensor.
pub type LatentTensor<T> = Planar<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Pixel,
    Haar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub levels: usize,
    pub scaling: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            kind: CodecKind::Haar,
            levels: 2,
            scaling: 1.0,
        }
    }
}

impl CodecConfig {
    pub fn pixel() -> Self {
        CodecConfig {
            kind: CodecKind::Pixel,
            levels: 0,
            scaling: 1.0,
        }
    }

    pub fn haar(levels: usize) -> Self {
        CodecConfig {
            kind: CodecKind::Haar,
            levels,
            scaling: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scaling > 0.0 && self.scaling.is_finite()) {
            return Err(Error::Config(format!("codec scaling must be positive, got {}", self.scaling)));
        }
        if self.kind == CodecKind::Pixel && self.levels != 0 {
            return Err(Error::Config("pixel codec requires levels = 0".into()));
        }
        if self.levels > 8 {
            return Err(Error::Config(format!("too many codec levels: {}", self.levels)));
        }
        Ok(())
    }

    fn effective_levels(&self) -> usize {
        match self.kind {
            CodecKind::Pixel => 0,
            CodecKind::Haar => self.levels,
        }
    }

    /// Latent shape for an image of the given size.
    pub fn latent_shape(&self, channels: usize, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let f = 1usize << self.effective_levels();
        if height % f != 0 || width % f != 0 {
            return Err(Error::Shape(format!(
                "image {height}×{width} is not divisible by 2^{}",
                self.effective_levels()
            )));
        }
        Ok((channels * f * f, height / f, width / f))
    }

    /// Image `z = E(x)`.
    pub fn encode<T: Scalar>(&self, image: &Planar<T>) -> Result<LatentTensor<T>> {
        self.latent_shape(image.channels, image.height, image.width)?;
        let mut z = image.clone();
        for _ in 0..self.effective_levels() {
            z = haar_analysis(&z);
        }
        let s = T::lit(self.scaling);
        if self.scaling != 1.0 {
            z.data.iter_mut().for_each(|v| *v *= s);
        }
        Ok(z)
    }

    /// Image `x = D(z)`, the exact inverse of [`CodecConfig::encode`].
    pub fn decode<T: Scalar>(&self, z: &LatentTensor<T>) -> Result<Planar<T>> {
        self.validate()?;
        let f = 1usize << (2 * self.effective_levels());
        if z.channels % f != 0 || z.channels / f == 0 {
            return Err(Error::Shape(format!(
                "latent with {} channels does not match a {}-level codec",
                z.channels,
                self.effective_levels()
            )));
        }
        let mut x = z.clone();
        if self.scaling != 1.0 {
            let inv = T::lit(1.0 / self.scaling);
            x.data.iter_mut().for_each(|v| *v *= inv);
        }
        for _ in 0..self.effective_levels() {
            x = haar_synthesis(&x);
        }
        Ok(x)
    }
}

/// One orthonormal Haar level: channel `c` becomes channels `4c..4c+4`
/// holding (LL, LH, HL, HH) of each 2×2 block.
fn haar_analysis<T: Scalar>(x: &Planar<T>) -> Planar<T> {
    let (c, h, w) = x.shape();
    let (h2, w2) = (h / 2, w / 2);
    let half = T::lit(0.5);
    let mut out = Planar::zeros(c * 4, h2, w2);
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let a = x.at(ch, 2 * y, 2 * xx);
                let b = x.at(ch, 2 * y, 2 * xx + 1);
                let cc = x.at(ch, 2 * y + 1, 2 * xx);
                let d = x.at(ch, 2 * y + 1, 2 * xx + 1);
                *out.at_mut(4 * ch, y, xx) = half * ((a + b) + (cc + d));
                *out.at_mut(4 * ch + 1, y, xx) = half * ((a - b) + (cc - d));
                *out.at_mut(4 * ch + 2, y, xx) = half * ((a + b) - (cc + d));
                *out.at_mut(4 * ch + 3, y, xx) = half * ((a - b) - (cc - d));
            }
        }
    }
    out
}

/// Inverse of [`haar_analysis`]; the 4×4 Haar matrix is symmetric and orthogonal.
fn haar_synthesis<T: Scalar>(z: &Planar<T>) -> Planar<T> {
    let (c4, h2, w2) = z.shape();
    let c = c4 / 4;
    let half = T::lit(0.5);
    let mut out = Planar::zeros(c, h2 * 2, w2 * 2);
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                let ll = z.at(4 * ch, y, xx);
                let lh = z.at(4 * ch + 1, y, xx);
                let hl = z.at(4 * ch + 2, y, xx);
                let hh = z.at(4 * ch + 3, y, xx);
                *out.at_mut(ch, 2 * y, 2 * xx) = half * ((ll + lh) + (hl + hh));
                *out.at_mut(ch, 2 * y, 2 * xx + 1) = half * ((ll - lh) + (hl - hh));
                *out.at_mut(ch, 2 * y + 1, 2 * xx) = half * ((ll + lh) - (hl + hh));
                *out.at_mut(ch, 2 * y + 1, 2 * xx + 1) = half * ((ll - lh) - (hl - hh));
            }
        }
    }
    out
}

/// Writes a cached latent as `DDLAT <dtype> <c> <h> <w>\n` followed by
/// little-endian values.
pub fn write_latent<T: Scalar>(path: &Path, z: &LatentTensor<T>) -> Result<()> {
    let mut bytes = format!("DDLAT {} {} {} {}\n", T::DTYPE, z.channels, z.height, z.width).into_bytes();
    bytes.reserve(z.len() * T::BYTES);
    for &v in &z.data {
        v.write_le(&mut bytes);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_latent<T: Scalar>(path: &Path) -> Result<LatentTensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing latent header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != "DDLAT" {
        return Err(Error::format(path, format!("bad latent header {header:?}")));
    }
    if parts[1] != T::DTYPE {
        return Err(Error::format(path, format!("dtype {} but {} requested", parts[1], T::DTYPE)));
    }
    let dims: Vec<usize> = parts[2..]
        .iter()
        .map(|p| p.parse().map_err(|_| Error::format(path, format!("bad dimension {p:?}"))))
        .collect::<Result<_>>()?;
    let payload = &bytes[nl + 1..];
    let n = dims[0] * dims[1] * dims[2];
    if payload.len() != n * T::BYTES {
        return Err(Error::format(path, "payload length does not match header"));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Planar::from_vec(dims[0], dims[1], dims[2], data)
}
