use candle_core::{Tensor, D};

use super::layout::{Activation, HeadLayout};
use crate::datamodel::LabeledTarget;
use crate::error::{Error, Result};
use crate::nn::log_softmax_last;

/// Equally weighted sum over heads of each head's loss averaged over its
/// unmasked samples: sigmoid cross-entropy for binary heads, softmax
/// cross-entropy for multiclass heads. A head whose samples are all masked
/// adds nothing and receives no gradient; a fully masked batch yields 0.
///
/// `targets[b][h]` is sample `b`'s label for head `h` in layout order.
pub fn masked_multitask_loss(logits: &Tensor, targets: &[Vec<LabeledTarget>], layout: &HeadLayout) -> Result<Tensor> {
    let (b, width) = logits.dims2()?;
    if width != layout.total() {
        return Err(Error::Shape(format!("{width} logits for a {}-way layout", layout.total())));
    }
    if targets.len() != b || targets.iter().any(|t| t.len() != layout.groups.len()) {
        return Err(Error::Shape("targets must hold one label per head per sample".into()));
    }
    let dev = logits.device();
    let mut total: Option<Tensor> = None;
    for (h, g) in layout.groups.iter().enumerate() {
        let rows: Vec<u32> = (0..b).filter(|&i| !targets[i][h].is_masked()).map(|i| i as u32).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len();
        let ys: Vec<f64> = rows.iter().map(|&i| targets[i as usize][h].y).collect();
        let idx = Tensor::from_vec(rows, n, dev)?;
        let z = logits.index_select(&idx, 0)?.narrow(1, g.offset, g.arity)?.contiguous()?;
        let term = match g.activation {
            Activation::Sigmoid => {
                let x = z.flatten_all()?;
                let y = Tensor::new(ys.as_slice(), dev)?.to_dtype(x.dtype())?;
                let soft = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
                ((x.relu()? - (&x * &y)?)? + soft)?.mean_all()?
            }
            Activation::Softmax => {
                if let Some(bad) = ys.iter().find(|&&y| y < 0.0 || y as usize >= g.arity) {
                    return Err(Error::Shape(format!("class {bad} outside head {} of arity {}", g.name, g.arity)));
                }
                let cls: Vec<u32> = ys.iter().map(|&y| y as u32).collect();
                let cls = Tensor::from_vec(cls, (n, 1), dev)?;
                log_softmax_last(&z)?.gather(&cls, D::Minus1)?.mean_all()?.neg()?
            }
        };
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        // backward through a zero scale records no gradient for any parameter
        None => Ok((logits.sum_all()? * 0.0)?),
    }
}
