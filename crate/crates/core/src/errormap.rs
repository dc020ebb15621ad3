//! Zero-shot abnormality maps from multi-pass masked reconstruction error.
//!
//! For pass `p` with pixel mask `M`, `δ = (x̂ − x) ⊙ M`, `e = mean_c δ²`, and
//! the map is `E = Σ_p e / Σ_p M` wherever the coverage `Σ_p M` is positive.
//! Never-masked pixels stay undefined.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Image;
use crate::error::{Error, Result};
use crate::evalstat::{mann_whitney, stars};
use crate::mae::{composite, sample_mask_with, unpatchify, MaeModel, MaskPattern};

pub const DEFAULT_PASSES: usize = 10;

/// Luminance above which a pixel counts as anatomy rather than the dark
/// detector background.
pub const DEFAULT_FOREGROUND: f32 = 0.05;

/// One masked reconstruction and its per-pixel error.
#[derive(Debug, Clone)]
pub struct PassRecord {
    pub mask: MaskPattern,
    /// `H×W` 0/1 pixel mask derived from `mask`.
    pub pixel_mask: Vec<u8>,
    pub reconstruction: Image,
    /// `H×W` per-pixel error, zero wherever the pixel was visible.
    pub error: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub height: usize,
    pub width: usize,
    /// `E(i, j)`; `NaN` marks zero-coverage pixels.
    pub values: Vec<f64>,
    pub coverage: Vec<u32>,
    pub n_passes: usize,
}

impl ErrorMap {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let k = i * self.width + j;
        (self.coverage[k] > 0).then_some(self.values[k])
    }

    pub fn defined_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c > 0).count()
    }

    /// Portable float map (`Pf`, little-endian, bottom row first); undefined
    /// pixels are written as NaN.
    pub fn to_pfm(&self) -> Vec<u8> {
        let mut out = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for i in (0..self.height).rev() {
            for j in 0..self.width {
                let v = self.values[i * self.width + j] as f32;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Display heatmap: `E` min–max scaled over defined pixels and colored;
    /// undefined pixels are black.
    pub fn heatmap_rgb(&self) -> Vec<u8> {
        let defined: Vec<f64> = self
            .values
            .iter()
            .zip(&self.coverage)
            .filter(|(_, &c)| c > 0)
            .map(|(v, _)| *v)
            .collect();
        let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut out = Vec::with_capacity(self.values.len() * 3);
        for (v, &c) in self.values.iter().zip(&self.coverage) {
            if c == 0 {
                out.extend_from_slice(&[0, 0, 0]);
            } else {
                out.extend_from_slice(&colormap((v - lo) / span));
            }
        }
        out
    }

    /// Writes `error.pfm`, `coverage.png` (16-bit counts) and `heatmap.png`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let pfm = dir.join("error.pfm");
        std::fs::File::create(&pfm)
            .and_then(|mut f| f.write_all(&self.to_pfm()))
            .map_err(|e| Error::io(&pfm, e))?;
        let (w, h) = (self.width as u32, self.height as u32);
        let counts: Vec<u16> = self.coverage.iter().map(|&c| c.min(u16::MAX as u32) as u16).collect();
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, counts)
            .expect("coverage buffer size")
            .save(dir.join("coverage.png"))
            .map_err(|e| Error::Image(e.to_string()))?;
        image::RgbImage::from_raw(w, h, self.heatmap_rgb())
            .expect("heatmap buffer size")
            .save(dir.join("heatmap.png"))
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(())
    }
}

fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 0.5],
        [0.0, 0.5, 1.0],
        [0.5, 1.0, 0.5],
        [1.0, 0.75, 0.0],
        [0.75, 0.0, 0.0],
    ];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let k = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - k as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = ((STOPS[k][c] * (1.0 - f) + STOPS[k + 1][c] * f) * 255.0).round() as u8;
    }
    out
}

/// `(x̂ − x) ⊙ M` with the `H×W` mask broadcast over channels.
pub fn masked_delta(x: &Image, x_hat: &Image, pixel_mask: &[u8]) -> Result<Vec<f64>> {
    if !x.same_shape(x_hat) {
        return Err(Error::Shape("reconstruction and image differ in shape".into()));
    }
    let c = x.channels();
    if pixel_mask.len() * c != x.data().len() {
        return Err(Error::Shape("pixel mask does not match the image".into()));
    }
    Ok(x
        .data()
        .iter()
        .zip(x_hat.data())
        .enumerate()
        .map(|(k, (&a, &b))| (b as f64 - a as f64) * f64::from(pixel_mask[k / c]))
        .collect())
}

/// Channel mean of squared `δ`.
pub fn pixel_error(delta: &[f64], channels: usize) -> Vec<f64> {
    delta
        .chunks(channels)
        .map(|px| px.iter().map(|d| d * d).sum::<f64>() / channels as f64)
        .collect()
}

pub fn pass_record(x: &Image, x_hat: Image, mask: MaskPattern, patch: usize) -> Result<PassRecord> {
    let grid = (x.height() / patch, x.width() / patch);
    let pixel_mask = mask.pixel_mask(grid, patch);
    let error = pixel_error(&masked_delta(x, &x_hat, &pixel_mask)?, x.channels());
    Ok(PassRecord {
        mask,
        pixel_mask,
        reconstruction: x_hat,
        error,
    })
}

/// Coverage-normalized sum over passes. Each pixel's contributions are
/// summed in sorted order, so the result does not depend on pass order.
pub fn accumulate(passes: &[PassRecord]) -> Result<ErrorMap> {
    let first = passes
        .first()
        .ok_or_else(|| Error::EmptyScope("no reconstruction passes".into()))?;
    let (height, width) = (first.reconstruction.height(), first.reconstruction.width());
    let n = height * width;
    if passes
        .iter()
        .any(|p| p.error.len() != n || p.pixel_mask.len() != n)
    {
        return Err(Error::Shape("passes disagree in shape".into()));
    }
    let mut values = vec![f64::NAN; n];
    let mut coverage = vec![0u32; n];
    let mut terms = Vec::with_capacity(passes.len());
    for k in 0..n {
        terms.clear();
        for p in passes {
            if p.pixel_mask[k] != 0 {
                terms.push(p.error[k]);
            }
        }
        if terms.is_empty() {
            continue;
        }
        terms.sort_by(f64::total_cmp);
        coverage[k] = terms.len() as u32;
        values[k] = terms.iter().sum::<f64>() / terms.len() as f64;
    }
    Ok(ErrorMap {
        height,
        width,
        values,
        coverage,
        n_passes: passes.len(),
    })
}

/// Reconstruction passes under `n_passes` random masks at the model's
/// pretraining ratio. The model is only read.
pub fn reconstruction_passes(image: &Image, model: &MaeModel, n_passes: usize, seed: u64) -> Result<Vec<PassRecord>> {
    if n_passes == 0 {
        return Err(Error::EmptyScope("no reconstruction passes".into()));
    }
    let cfg = &model.config;
    if image.height() != cfg.image_size[0] || image.width() != cfg.image_size[1] || image.channels() != cfg.channels {
        return Err(Error::Shape(format!(
            "image {}x{}x{} does not match model input {}x{}x{}",
            image.height(),
            image.width(),
            image.channels(),
            cfg.image_size[0],
            cfg.image_size[1],
            cfg.channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = (0..n_passes)
        .map(|_| sample_mask_with(cfg.num_patches(), cfg.mask_ratio, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let preds = model.predict(image, &masks)?;
    masks
        .into_iter()
        .zip(preds)
        .map(|(mask, pred)| {
            let x_hat = composite(image, &unpatchify(&pred)?, &mask, cfg.patch_size)?;
            pass_record(image, x_hat, mask, cfg.patch_size)
        })
        .collect()
}

pub fn generate_error_map(image: &Image, model: &MaeModel, n_passes: usize, seed: u64) -> Result<ErrorMap> {
    accumulate(&reconstruction_passes(image, model, n_passes, seed)?)
}

/// Pixels of `image` brighter than `threshold` (channel mean). Used as the
/// anatomical region for [`score_image`] so that empty background does not
/// dilute the mean.
pub fn foreground_mask(image: &Image, threshold: f32) -> Vec<u8> {
    image.luminance().into_iter().map(|v| u8::from(v > threshold)).collect()
}

/// Mean of `E` over defined pixels, optionally restricted to a pixel mask.
pub fn score_image(map: &ErrorMap, region: Option<&[u8]>) -> Result<f64> {
    if let Some(r) = region {
        if r.len() != map.values.len() {
            return Err(Error::Shape("region mask does not match the error map".into()));
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..map.values.len() {
        if map.coverage[k] == 0 || region.is_some_and(|r| r[k] == 0) {
            continue;
        }
        sum += map.values[k];
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyScope("no defined pixels in scope".into()));
    }
    Ok(sum / n as f64)
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    #[serde(rename = "U")]
    pub u: f64,
    pub p: f64,
    pub median_normal: f64,
    pub median_abnormal: f64,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub stars: String,
    pub exact: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Two-sided Mann–Whitney comparison of per-image scores. `U` is reported
/// for the abnormal group.
pub fn compare_groups(normal: &[f64], abnormal: &[f64]) -> Result<GroupComparison> {
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::EmptyScope("both groups need at least one score".into()));
    }
    let mut warnings = Vec::new();
    if normal.len() < 3 || abnormal.len() < 3 {
        warnings.push("underpowered: fewer than 3 scores in a group".to_string());
        log::warn!("underpowered group comparison");
    }
    let mw = mann_whitney(abnormal, normal)?;
    Ok(GroupComparison {
        u: mw.u,
        p: mw.p_value,
        median_normal: median(normal),
        median_abnormal: median(abnormal),
        n_normal: normal.len(),
        n_abnormal: abnormal.len(),
        stars: stars(mw.p_value).to_string(),
        exact: mw.exact,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_and_error_examples() {
        let x = Image::new(1, 2, 2, vec![0.5, 0.5, 0.2, 0.2]).unwrap();
        let xh = Image::new(1, 2, 2, vec![0.6, 0.2, 0.9, 0.9]).unwrap();
        let d = masked_delta(&x, &xh, &[1, 0]).unwrap();
        assert!((d[0] - 0.1).abs() < 1e-7 && (d[1] + 0.3).abs() < 1e-7);
        assert_eq!(&d[2..], &[0.0, 0.0]);
        let e = pixel_error(&[0.1, -0.3], 2);
        assert!((e[0] - 0.05).abs() < 1e-15);
        assert_eq!(masked_delta(&x, &xh, &[0, 0]).unwrap(), vec![0.0; 4]);
        assert_eq!(masked_delta(&x, &x, &[1, 1]).unwrap(), vec![0.0; 4]);
    }

    fn record(mask: Vec<u8>, error: Vec<f64>) -> PassRecord {
        PassRecord {
            mask: MaskPattern::from_flags(vec![]),
            reconstruction: Image::filled(1, mask.len(), 1, 0.0),
            pixel_mask: mask,
            error,
        }
    }

    #[test]
    fn coverage_normalized_mean() {
        let mut passes: Vec<PassRecord> = (0..10).map(|_| record(vec![0, 0], vec![0.0, 0.0])).collect();
        passes[0] = record(vec![1, 0], vec![0.2, 0.0]);
        passes[2] = record(vec![1, 0], vec![0.4, 0.0]);
        let m = accumulate(&passes).unwrap();
        assert!((m.get(0, 0).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(m.get(0, 1), None);
        assert!(m.values[1].is_nan());
        assert_eq!(m.coverage, vec![2, 0]);
        assert!(accumulate(&[]).is_err());
    }

    #[test]
    fn score_examples() {
        let m = ErrorMap {
            height: 1,
            width: 4,
            values: vec![0.4, 0.4, 0.0, f64::NAN],
            coverage: vec![1, 1, 1, 0],
            n_passes: 1,
        };
        assert!((score_image(&m, Some(&[1, 1, 0, 0])).unwrap() - 0.4).abs() < 1e-15);
        assert!((score_image(&m, None).unwrap() - 0.8 / 3.0).abs() < 1e-15);
        assert!(score_image(&m, Some(&[0, 0, 0, 1])).is_err());
    }

    #[test]
    fn pfm_layout() {
        let m = ErrorMap {
            height: 2,
            width: 1,
            values: vec![1.0, f64::NAN],
            coverage: vec![1, 0],
            n_passes: 1,
        };
        let b = m.to_pfm();
        let header = b"Pf\n1 2\n-1.0\n";
        assert_eq!(&b[..header.len()], header);
        let last = f32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
        assert_eq!(last, 1.0);
    }

    #[test]
    fn group_comparison_warns_when_small() {
        let r = compare_groups(&[0.1, 0.2], &[0.5, 0.6]).unwrap();
        assert!(!r.warnings.is_empty());
        assert_eq!(r.u, 4.0);
    }
}
