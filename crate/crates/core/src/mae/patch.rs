use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Image;
use crate::error::{Error, Result};

/// Non-overlapping `p×p` patches in row-major grid order. Each row holds one
/// patch laid out as (py, px, c).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub channels: usize,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
    pub data: Vec<f32>,
}

impl PatchGrid {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patch(&self, n: usize) -> &[f32] {
        let d = self.patch_dim();
        &self.data[n * d..(n + 1) * d]
    }

    pub fn patch_mut(&mut self, n: usize) -> &mut [f32] {
        let d = self.patch_dim();
        &mut self.data[n * d..(n + 1) * d]
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} image is not divisible into {patch_size}-pixel patches"
        )));
    }
    let (gr, gc) = (h / patch_size, w / patch_size);
    let mut data = Vec::with_capacity(h * w * c);
    let src = image.data();
    for r in 0..gr {
        for q in 0..gc {
            for py in 0..patch_size {
                let row = r * patch_size + py;
                let start = (row * w + q * patch_size) * c;
                data.extend_from_slice(&src[start..start + patch_size * c]);
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        channels: c,
        grid: (gr, gc),
        data,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Result<Image> {
    let p = grid.patch_size;
    let c = grid.channels;
    let (h, w) = (grid.grid.0 * p, grid.grid.1 * p);
    if grid.data.len() != h * w * c {
        return Err(Error::Shape(format!(
            "patch buffer of {} values does not match a {h}x{w}x{c} image",
            grid.data.len()
        )));
    }
    let mut data = vec![0.0f32; h * w * c];
    let mut k = 0;
    for r in 0..grid.grid.0 {
        for q in 0..grid.grid.1 {
            for py in 0..p {
                let row = r * p + py;
                let start = (row * w + q * p) * c;
                data[start..start + p * c].copy_from_slice(&grid.data[k..k + p * c]);
                k += p * c;
            }
        }
    }
    Image::new(h, w, c, data)
}

/// Which patches are hidden from the encoder (`true` = masked).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPattern {
    masked: Vec<bool>,
}

impl MaskPattern {
    /// Builds a pattern from explicit flags without the degenerate-mask guard.
    pub fn from_flags(masked: Vec<bool>) -> Self {
        Self { masked }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn flags(&self) -> &[bool] {
        &self.masked
    }

    pub fn is_masked(&self, n: usize) -> bool {
        self.masked[n]
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    /// Per-pixel 0/1 mask of an `h×w` image for patch size `p`.
    pub fn pixel_mask(&self, grid: (usize, usize), p: usize) -> Vec<u8> {
        let (h, w) = (grid.0 * p, grid.1 * p);
        let mut out = vec![0u8; h * w];
        for i in 0..h {
            for j in 0..w {
                out[i * w + j] = self.masked[(i / p) * grid.1 + j / p] as u8;
            }
        }
        out
    }
}

/// Number of patches masked for `n` patches at `ratio`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

/// Uniformly random subset of exactly `round(ratio·n)` patches.
pub fn sample_mask(n_patches: usize, mask_ratio: f64, seed: u64) -> Result<MaskPattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mask_with(n_patches, mask_ratio, &mut rng)
}

pub fn sample_mask_with(n_patches: usize, mask_ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskPattern> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {mask_ratio} outside (0, 1)")));
    }
    let k = masked_count(n_patches, mask_ratio);
    if k == 0 || k == n_patches {
        return Err(Error::DegenerateMask {
            masked: k,
            total: n_patches,
        });
    }
    let mut masked = vec![false; n_patches];
    for i in sample(rng, n_patches, k) {
        masked[i] = true;
    }
    Ok(MaskPattern { masked })
}
