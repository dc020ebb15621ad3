use crate::error::{Error, Result};

/// Row-major `H×W×C` pixel grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "zero-area image {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, c: usize) -> usize {
        (i * self.width + j) * self.channels + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f32 {
        self.data[self.index(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f32) {
        let idx = self.index(i, j, c);
        self.data[idx] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Channel-mean grayscale plane.
    pub fn luminance(&self) -> Vec<f32> {
        let c = self.channels as f32;
        self.data
            .chunks(self.channels)
            .map(|px| px.iter().sum::<f32>() / c)
            .collect()
    }

    /// Replicates or averages channels so the result has `channels` planes.
    pub fn with_channels(&self, channels: usize) -> Image {
        if channels == self.channels {
            return self.clone();
        }
        let lum = self.luminance();
        let mut data = Vec::with_capacity(lum.len() * channels);
        for v in lum {
            data.extend(std::iter::repeat(v).take(channels));
        }
        Image {
            height: self.height,
            width: self.width,
            channels,
            data,
        }
    }

    /// Bilinear resampling with half-pixel centers (no antialiasing).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("resize target has zero area".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut out = Image::filled(height, width, self.channels, 0.0);
        for i in 0..height {
            let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for j in 0..width {
                let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = (fx - x0 as f64) as f32;
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
                    let bot = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
                    out.set(i, j, c, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        Ok(out)
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for i in 0..self.height {
            for j in 0..self.width {
                for c in 0..self.channels {
                    out.set(i, j, c, self.get(i, self.width - 1 - j, c));
                }
            }
        }
        out
    }

    /// Extracts a window given in continuous pixel coordinates and resamples it
    /// bilinearly to `out_h×out_w`. Pixels outside the source read as zero.
    pub fn crop_resize(
        &self,
        top: f64,
        left: f64,
        crop_h: f64,
        crop_w: f64,
        out_h: usize,
        out_w: usize,
    ) -> Image {
        self.sample_affine(out_h, out_w, |i, j| {
            let y = top + (i + 0.5) * crop_h / out_h as f64 - 0.5;
            let x = left + (j + 0.5) * crop_w / out_w as f64 - 0.5;
            (y, x)
        })
    }

    /// Samples the image at source coordinates produced by `map(i, j)` for every
    /// output pixel. Out-of-bounds reads are zero (radiograph background).
    pub fn sample_affine(
        &self,
        out_h: usize,
        out_w: usize,
        map: impl Fn(f64, f64) -> (f64, f64),
    ) -> Image {
        let mut out = Image::filled(out_h, out_w, self.channels, 0.0);
        let fetch = |y: isize, x: isize, c: usize| -> f32 {
            if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
                0.0
            } else {
                self.get(y as usize, x as usize, c)
            }
        };
        for i in 0..out_h {
            for j in 0..out_w {
                let (y, x) = map(i as f64, j as f64);
                let y0 = y.floor();
                let x0 = x.floor();
                let wy = (y - y0) as f32;
                let wx = (x - x0) as f32;
                let (y0, x0) = (y0 as isize, x0 as isize);
                for c in 0..self.channels {
                    let top = fetch(y0, x0, c) * (1.0 - wx) + fetch(y0, x0 + 1, c) * wx;
                    let bot = fetch(y0 + 1, x0, c) * (1.0 - wx) + fetch(y0 + 1, x0 + 1, c) * wx;
                    out.set(i, j, c, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_preserves_constants() {
        let img = Image::filled(17, 23, 1, 0.4);
        let out = img.resize_bilinear(64, 9).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn channel_replication_and_average() {
        let img = Image::new(1, 2, 1, vec![0.2, 0.6]).unwrap();
        let rgb = img.with_channels(3);
        assert_eq!(rgb.data(), &[0.2, 0.2, 0.2, 0.6, 0.6, 0.6]);
        let back = rgb.with_channels(1);
        assert!((back.get(0, 1, 0) - 0.6).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_buffers() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(Image::new(0, 2, 1, vec![]).is_err());
    }

    #[test]
    fn identity_crop_is_lossless() {
        let data: Vec<f32> = (0..36).map(|v| v as f32 / 36.0).collect();
        let img = Image::new(6, 6, 1, data).unwrap();
        let out = img.crop_resize(0.0, 0.0, 6.0, 6.0, 6, 6);
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
