//! Integer rasters, planar float tensors, and their PNG encodings.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::{Error, Result, Scalar};

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Single-channel 8-bit raster: class labels for masks, {0, 1} for sketches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Channel-major float tensor `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planar<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Maps `[0, 255]` to `[-1, 1]` in channel-major layout.
    pub fn to_planar<T: Scalar>(&self) -> Planar<T> {
        let n = self.width * self.height;
        let mut data = vec![T::zero(); 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = T::lit(px[c] as f64 / 127.5 - 1.0);
            }
        }
        Planar {
            channels: 3,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Values in `[0, 1]`, channel-major, for metric computations.
    pub fn to_unit(&self) -> Planar<f64> {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f64 / 255.0;
            }
        }
        Planar {
            channels: 3,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.width, self.height, png::ColorType::Rgb, png::BitDepth::Eight, None, &self.data)
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let (info, buf) = read_png(path, png::Transformations::EXPAND)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let data = match info.color_type {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => return Err(Error::format(path, "palette was not expanded")),
        };
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(path, "expected 8-bit channels"));
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data,
        })
    }

    /// Places `tiles` left to right in one row.
    pub fn hstack(tiles: &[RgbImage]) -> Result<RgbImage> {
        let first = tiles.first().ok_or_else(|| Error::Input("no tiles".into()))?;
        let (w, h) = (first.width, first.height);
        if tiles.iter().any(|t| t.width != w || t.height != h) {
            return Err(Error::Shape("grid tiles differ in size".into()));
        }
        let mut out = RgbImage::new(w * tiles.len(), h);
        for (i, t) in tiles.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    out.put(i * w + x, y, t.pixel(x, y));
                }
            }
        }
        Ok(out)
    }
}

impl LabelRaster {
    pub fn new(width: usize, height: usize) -> Self {
        LabelRaster {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Writes labels as palette indices.
    pub fn write_paletted_png(&self, path: &Path, palette: &[[u8; 3]]) -> Result<()> {
        let flat: Vec<u8> = palette.iter().flatten().copied().collect();
        write_png(
            path,
            self.width,
            self.height,
            png::ColorType::Indexed,
            png::BitDepth::Eight,
            Some(flat),
            &self.data,
        )
    }

    /// Reads palette indices without expanding them to colors.
    pub fn read_paletted_png(path: &Path) -> Result<Self> {
        let (info, buf) = read_png(path, png::Transformations::IDENTITY)?;
        if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(path, "expected an 8-bit paletted image"));
        }
        Ok(LabelRaster {
            width: info.width as usize,
            height: info.height as usize,
            data: buf,
        })
    }

    /// Writes a {0, 1} raster as a 1-bit grayscale image.
    pub fn write_bilevel_png(&self, path: &Path) -> Result<()> {
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) != 0 {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        write_png(path, self.width, self.height, png::ColorType::Grayscale, png::BitDepth::One, None, &packed)
    }

    /// Reads any grayscale image; nonzero pixels become 1.
    pub fn read_bilevel_png(path: &Path) -> Result<Self> {
        let img = RgbImage::read_png(path)?;
        Ok(LabelRaster {
            width: img.width,
            height: img.height,
            data: img.data.chunks_exact(3).map(|p| u8::from(p[0] > 127)).collect(),
        })
    }
}

impl<T: Scalar> Planar<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Planar {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values do not fill ({channels}, {height}, {width})",
                data.len()
            )));
        }
        Ok(Planar {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Planar {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> Planar<U> {
        Planar {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    /// Inverse of [`RgbImage::to_planar`], clamping to the 8-bit range.
    pub fn to_rgb(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", self.channels)));
        }
        let n = self.width * self.height;
        let mut img = RgbImage::new(self.width, self.height);
        for i in 0..n {
            for c in 0..3 {
                let v = (self.data[c * n + i].as_f64() + 1.0) * 127.5;
                img.data[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(img)
    }
}

impl<T> Planar<T> {
    pub fn same_shape<U>(&self, other: &Planar<U>) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let to_io = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

fn read_png(path: &Path, tf: png::Transformations) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(tf);
    let to_fmt = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = dec.read_info().map_err(to_fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(to_fmt)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_codecs_are_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 17 % 256) as u8;
        }
        let p = dir.path().join("a.png");
        img.write_png(&p).unwrap();
        assert_eq!(RgbImage::read_png(&p).unwrap(), img);

        let mut lab = LabelRaster::new(11, 2);
        for (i, v) in lab.data.iter_mut().enumerate() {
            *v = (i % 5) as u8;
        }
        let p = dir.path().join("m.png");
        lab.write_paletted_png(&p, &[[0, 0, 0], [1, 1, 1], [2, 2, 2], [3, 3, 3], [4, 4, 4]]).unwrap();
        assert_eq!(LabelRaster::read_paletted_png(&p).unwrap(), lab);

        let bits = LabelRaster {
            width: 11,
            height: 2,
            data: lab.data.iter().map(|&v| u8::from(v % 2 == 1)).collect(),
        };
        let p = dir.path().join("s.png");
        bits.write_bilevel_png(&p).unwrap();
        assert_eq!(LabelRaster::read_bilevel_png(&p).unwrap(), bits);
    }

    #[test]
    fn planar_roundtrip_is_exact_on_bytes() {
        let mut img = RgbImage::new(4, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 5) as u8;
        }
        assert_eq!(img.to_planar::<f32>().to_rgb().unwrap(), img);
    }
}
