use crate::error::{Error, Result};
use crate::Scalar;

/// Row-major interleaved pixel buffer (`(y * width + x) * channels + c`).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Raster<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![T::zero(); width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, pixel: &[T]) -> Self {
        let mut data = Vec::with_capacity(width * height * pixel.len());
        for _ in 0..width * height {
            data.extend_from_slice(pixel);
        }
        Raster {
            width,
            height,
            channels: pixel.len(),
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height}x{channels} raster needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.channels)
    }

    /// Copy of the `height x width` block at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::OutOfBounds(format!(
                "({row},{col}) {height}x{width} in {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(width * height * c);
        for y in row..row + height {
            let start = (y * self.width + col) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Ok(Raster {
            width,
            height,
            channels: c,
            data,
        })
    }

    /// Writes `block` with its top-left corner at (`row`, `col`).
    pub fn paste(&mut self, block: &Raster<T>, row: usize, col: usize) -> Result<()> {
        if block.channels != self.channels
            || row + block.height > self.height
            || col + block.width > self.width
        {
            return Err(Error::OutOfBounds(format!(
                "paste {}x{} at ({row},{col}) into {}x{}",
                block.height, block.width, self.height, self.width
            )));
        }
        let c = self.channels;
        for y in 0..block.height {
            let dst = ((row + y) * self.width + col) * c;
            let src = y * block.width * c;
            self.data[dst..dst + block.width * c].copy_from_slice(&block.data[src..src + block.width * c]);
        }
        Ok(())
    }

    /// Mean over non-overlapping `factor x factor` blocks (trailing
    /// rows/cols that do not fill a block are dropped).
    pub fn avg_pool(&self, factor: usize) -> Raster<T> {
        assert!(factor > 0, "pool factor must be positive");
        let (w, h, c) = (self.width / factor, self.height / factor, self.channels);
        let inv = T::one() / T::from_usize(factor * factor).unwrap();
        let mut out = Raster::new(w, h, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let mut s = T::zero();
                    for dy in 0..factor {
                        let base = ((y * factor + dy) * self.width + x * factor) * c + ch;
                        for dx in 0..factor {
                            s += self.data[base + dx * c];
                        }
                    }
                    out.data[(y * w + x) * c + ch] = s * inv;
                }
            }
        }
        out
    }

    /// Bilinear resampling with half-pixel centres (corners not aligned).
    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Raster<T> {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        let c = self.channels;
        let axis = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|i| {
                    let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                    let lo = src.floor() as usize;
                    let hi = (lo + 1).min(inp - 1);
                    (lo, hi, T::from_f64_lossy(src - lo as f64))
                })
                .collect()
        };
        let xs = axis(out_w, self.width);
        let ys = axis(out_h, self.height);
        let mut out = Raster::new(out_w, out_h, c);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                for ch in 0..c {
                    let p = |y: usize, x: usize| self.data[(y * self.width + x) * c + ch];
                    let top = p(y0, x0) + (p(y0, x1) - p(y0, x0)) * fx;
                    let bot = p(y1, x0) + (p(y1, x1) - p(y1, x0)) * fx;
                    out.data[(oy * out_w + ox) * c + ch] = top + (bot - top) * fy;
                }
            }
        }
        out
    }

    /// Nearest 8-bit code per value (`round(v * 255)`, clamped).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let inv = 1.0 / 255.0;
        let data = bytes.iter().map(|&b| T::from_f64_lossy(f64::from(b) * inv)).collect();
        Self::from_vec(width, height, channels, data)
    }

    /// Snaps every value to the 8-bit grid used on disk.
    pub fn quantized(&self) -> Self {
        Self::from_u8(self.width, self.height, self.channels, &self.to_u8()).expect("same dims")
    }

    pub fn cast<U: Scalar>(&self) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn all_unit_interval(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.is_finite() && *v >= T::zero() && *v <= T::one())
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.channels];
        for px in self.pixels() {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += v.to_f64_lossy();
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Raster<f64> {
        let data = (0..w * h * 3).map(|i| (i % 97) as f64 / 97.0).collect();
        Raster::from_vec(w, h, 3, data).unwrap()
    }

    #[test]
    fn crop_and_paste_are_inverse() {
        let r = ramp(8, 6);
        let block = r.crop(1, 2, 3, 4).unwrap();
        let mut blank = Raster::new(8, 6, 3);
        blank.paste(&block, 1, 2).unwrap();
        assert_eq!(blank.crop(1, 2, 3, 4).unwrap(), block);
        assert!(r.crop(4, 0, 3, 1).is_err());
    }

    #[test]
    fn halving_bilinear_equals_avg_pool() {
        let r = ramp(8, 8);
        let a = r.resize_bilinear(4, 4);
        let b = r.avg_pool(2);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let r = Raster::filled(5, 7, &[0.25f64, 0.5, 0.75]);
        let out = r.resize_bilinear(11, 3);
        assert_eq!(out.width(), 11);
        for px in out.pixels() {
            assert_eq!(px, &[0.25, 0.5, 0.75]);
        }
    }

    #[test]
    fn u8_roundtrip_on_grid() {
        let bytes: Vec<u8> = (0..=255u8).chain(0..=255u8).chain(0..=255u8).collect();
        let r = Raster::<f32>::from_u8(16, 16, 3, &bytes).unwrap();
        assert_eq!(r.to_u8(), bytes);
    }
}
