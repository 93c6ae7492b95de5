//! Dense 2D grids, image frames and the shared little-endian map layout
//! (`magic`, u32 height, u32 width, f32 row-major payload).

use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major 2D grid of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Grid {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "grid {}x{} needs {} values, got {}",
                height,
                width,
                width * height,
                values.len()
            )));
        }
        Ok(Grid { width, height, values })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Grid { width, height, values }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] += v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Grid {
        self.map(|v| v * factor)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Grid) -> bool {
        self.dims() == other.dims()
    }

    /// Mirror around the vertical axis.
    pub fn flip_horizontal(&self) -> Grid {
        Grid::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Grid> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {}x{} at ({}, {}) exceeds grid {}x{}",
                height, width, x0, y0, self.height, self.width
            )));
        }
        Ok(Grid::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y)))
    }

    /// Serialize with the shared map layout under the given magic.
    pub fn write_binary<W: Write>(&self, magic: &[u8; 4], mut w: W) -> std::io::Result<()> {
        w.write_all(magic)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for &v in &self.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_binary<R: Read>(magic: &[u8; 4], what: &'static str, mut r: R) -> Result<Grid> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::format(what, e.to_string()))?;
        Self::decode_binary(magic, what, &bytes)
    }

    pub fn decode_binary(magic: &[u8; 4], what: &'static str, bytes: &[u8]) -> Result<Grid> {
        let (height, width, payload) = decode_header(magic, what, bytes)?;
        if payload.len() != height * width * 4 {
            return Err(Error::format(
                what,
                format!(
                    "payload holds {} bytes, expected {} for {}x{}",
                    payload.len(),
                    height * width * 4,
                    height,
                    width
                ),
            ));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Grid::from_vec(width, height, values)
    }
}

/// Splits `magic | u32 height | u32 width | payload`.
pub(crate) fn decode_header<'a>(
    magic: &[u8; 4],
    what: &'static str,
    bytes: &'a [u8],
) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 12 {
        return Err(Error::format(what, "truncated header"));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            what,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let height = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let width = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    Ok((height, width, &bytes[12..]))
}

macro_rules! grid_newtype {
    ($(#[$meta:meta])* $name:ident, $magic:expr, $what:expr) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name(pub Grid);

        impl $name {
            pub const MAGIC: [u8; 4] = *$magic;

            pub fn zeros(width: usize, height: usize) -> Self {
                $name(Grid::zeros(width, height))
            }

            pub fn into_grid(self) -> Grid {
                self.0
            }

            pub fn to_bytes(&self) -> Vec<u8> {
                let mut out = Vec::with_capacity(12 + 4 * self.0.values().len());
                self.0
                    .write_binary(&Self::MAGIC, &mut out)
                    .expect("writing to a Vec cannot fail");
                out
            }

            pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
                Grid::decode_binary(&Self::MAGIC, $what, bytes).map($name)
            }

            pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
                let path = path.as_ref();
                std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
            }

            pub fn load(path: impl AsRef<Path>) -> Result<Self> {
                let path = path.as_ref();
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                Self::from_bytes(&bytes)
            }
        }

        impl Deref for $name {
            type Target = Grid;
            fn deref(&self) -> &Grid {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Grid {
                &mut self.0
            }
        }

        impl From<Grid> for $name {
            fn from(g: Grid) -> Self {
                $name(g)
            }
        }
    };
}

grid_newtype!(
    /// Non-negative people density per pixel. Its sum is the count.
    DensityMap,
    b"DMAP",
    "density map"
);

grid_newtype!(
    /// Person-region mask: hard {0,1} ground truth or a soft prediction in [0,1].
    SegmentationMask,
    b"SMSK",
    "segmentation mask"
);

/// Multi-channel image with intensities nominally in `[0, 1]`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: Vec<Grid>,
}

impl Image {
    pub fn gray(grid: Grid) -> Self {
        Image { channels: vec![grid] }
    }

    pub fn width(&self) -> usize {
        self.channels[0].width()
    }

    pub fn height(&self) -> usize {
        self.channels[0].height()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Rec. 601 luma for 3-channel images; the single channel otherwise.
    pub fn luma(&self) -> Grid {
        match self.channels.len() {
            3 => {
                let (r, g, b) = (&self.channels[0], &self.channels[1], &self.channels[2]);
                Grid::from_fn(self.width(), self.height(), |x, y| {
                    0.299 * r.get(x, y) + 0.587 * g.get(x, y) + 0.114 * b.get(x, y)
                })
            }
            _ => self.channels[0].clone(),
        }
    }

    /// Converts to `n` channels by replicating luma or passing RGB through.
    pub fn with_channels(&self, n: usize) -> Image {
        if n == self.channels.len() {
            return self.clone();
        }
        let l = self.luma();
        Image { channels: vec![l; n] }
    }

    pub fn flip_horizontal(&self) -> Image {
        Image {
            channels: self.channels.iter().map(Grid::flip_horizontal).collect(),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        Ok(Image {
            channels: self
                .channels
                .iter()
                .map(|c| c.crop(x0, y0, width, height))
                .collect::<Result<_>>()?,
        })
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let to_unit = |v: u8| v as f64 / 255.0;
        match img.color().channel_count() {
            1 | 2 => {
                let g = img.to_luma8();
                let values = g.as_raw().iter().map(|&v| to_unit(v)).collect();
                Ok(Image::gray(Grid::from_vec(w, h, values)?))
            }
            _ => {
                let rgb = img.to_rgb8();
                let raw = rgb.as_raw();
                let channels = (0..3)
                    .map(|c| Grid::from_vec(w, h, raw.iter().skip(c).step_by(3).map(|&v| to_unit(v)).collect()))
                    .collect::<Result<_>>()?;
                Ok(Image { channels })
            }
        }
    }

    /// 8-bit PNG; values are clamped to `[0, 1]` before quantization.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let (w, h) = (self.width() as u32, self.height() as u32);
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels.len() {
            1 => {
                let raw = self.channels[0].values().iter().map(|&v| q(v)).collect();
                let buf = image::GrayImage::from_raw(w, h, raw).expect("buffer size matches");
                buf.save(path.as_ref())?;
            }
            3 => {
                let mut raw = Vec::with_capacity((w * h * 3) as usize);
                for i in 0..(w * h) as usize {
                    for c in &self.channels {
                        raw.push(q(c.values()[i]));
                    }
                }
                let buf = image::RgbImage::from_raw(w, h, raw).expect("buffer size matches");
                buf.save(path.as_ref())?;
            }
            n => {
                return Err(Error::Shape(format!("cannot encode {n}-channel image as PNG")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_binary_roundtrip() {
        let g = Grid::from_fn(3, 2, |x, y| (x + 10 * y) as f64 * 0.5);
        let d = DensityMap(g);
        let bytes = d.to_bytes();
        assert_eq!(&bytes[..4], b"DMAP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 12 + 6 * 4);
        assert_eq!(DensityMap::from_bytes(&bytes).unwrap(), d);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let m = SegmentationMask::zeros(2, 2);
        assert!(DensityMap::from_bytes(&m.to_bytes()).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = DensityMap::zeros(4, 4).to_bytes();
        assert!(DensityMap::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn flip_is_involution() {
        let g = Grid::from_fn(5, 3, |x, y| (x * 7 + y) as f64);
        assert_eq!(g.flip_horizontal().flip_horizontal(), g);
        assert_eq!(g.flip_horizontal().get(0, 1), g.get(4, 1));
    }
}
