use candle_core::{Tensor, D};

use super::patch::{MaskPattern, PatchGrid};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-6;

/// Standardizes each patch row (last dimension) to zero mean and unit
/// unbiased variance.
pub fn normalize_patches(target: &Tensor) -> Result<Tensor> {
    let p = target.dim(D::Minus1)?;
    let mean = target.mean_keepdim(D::Minus1)?;
    let centered = target.broadcast_sub(&mean)?;
    let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / (p.max(2) - 1) as f64)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// Mean squared error over masked patches: each patch contributes its mean
/// over `p²·C` values, and patches are averaged with weights `mask` (1 =
/// masked). `pred` and `target` are `(B, N, P)`, `mask` is `(B, N)`.
pub fn reconstruction_loss(pred: &Tensor, target: &Tensor, mask: &Tensor, normalize: bool) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.dims(),
            target.dims()
        )));
    }
    let (b, n, _) = pred.dims3()?;
    if mask.dims() != [b, n] {
        return Err(Error::Shape(format!("mask {:?} does not match ({b}, {n})", mask.dims())));
    }
    let count = mask.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if count == 0.0 {
        return Err(Error::DegenerateMask { masked: 0, total: b * n });
    }
    let target = if normalize { normalize_patches(target)? } else { target.clone() };
    let per_patch = (pred - target)?.sqr()?.mean(D::Minus1)?;
    Ok(((per_patch * mask)?.sum_all()? / count)?)
}

/// Scalar reference form of [`reconstruction_loss`] on patch grids.
pub fn reconstruction_loss_grid(
    pred: &PatchGrid,
    target: &PatchGrid,
    mask: &MaskPattern,
    normalize: bool,
) -> Result<f64> {
    if pred.grid != target.grid || pred.patch_dim() != target.patch_dim() || mask.len() != pred.num_patches() {
        return Err(Error::Shape("prediction, target and mask disagree".into()));
    }
    let count = mask.masked_count();
    if count == 0 {
        return Err(Error::DegenerateMask {
            masked: 0,
            total: mask.len(),
        });
    }
    let mut total = 0.0;
    for n in mask.masked_indices() {
        let t: Vec<f64> = target.patch(n).iter().map(|&v| v as f64).collect();
        let t = if normalize {
            let m = t.iter().sum::<f64>() / t.len() as f64;
            let var = t.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (t.len().max(2) - 1) as f64;
            t.iter().map(|v| (v - m) / (var + NORM_EPS).sqrt()).collect()
        } else {
            t
        };
        let se: f64 = pred
            .patch(n)
            .iter()
            .zip(&t)
            .map(|(&p, &t)| (p as f64 - t).powi(2))
            .sum();
        total += se / t.len() as f64;
    }
    Ok(total / count as f64)
}
