use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::Result;

/// Decoupled-weight-decay Adam over every parameter in a [`Params`] store.
///
/// Each parameter's step size is `lr · layer_scale[layer]`.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    layer_scale: Vec<f64>,
    state: Vec<(Tensor, Tensor)>,
    step: usize,
}

impl AdamW {
    pub fn new(params: &Params, beta1: f64, beta2: f64, weight_decay: f64) -> Result<Self> {
        let state = params
            .iter()
            .map(|p| {
                let z = p.var.as_tensor().zeros_like()?;
                Ok((z.clone(), z))
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            layer_scale: vec![1.0; params.num_layers().max(1)],
            state,
            step: 0,
        })
    }

    /// Multiplier applied to the learning rate of parameters in each layer.
    pub fn with_layer_scale(mut self, scale: Vec<f64>) -> Self {
        self.layer_scale = scale;
        self
    }

    pub fn layer_scale(&self) -> &[f64] {
        &self.layer_scale
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Effective learning rate of the named layer at base rate `lr`.
    pub fn layer_lr(&self, layer: usize, lr: f64) -> f64 {
        lr * self.layer_scale.get(layer).copied().unwrap_or(1.0)
    }

    pub fn step(&mut self, params: &Params, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (p, (m, v)) in params.iter().zip(self.state.iter_mut()) {
            let theta = p.var.as_tensor();
            let Some(g) = grads.get(theta) else { continue };
            // gradients can carry a graph back through the forward pass;
            // keeping it in the moments would retain every step's graph
            let g = &g.detach();
            let theta = &theta.detach();
            let lr_p = lr * self.layer_scale.get(p.layer).copied().unwrap_or(1.0);
            let new_m = ((&*m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let new_v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&new_v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&new_m / bc1)? / denom)?;
            let mut next = (theta - (update * lr_p)?)?;
            if p.decay && self.weight_decay > 0.0 {
                next = (next - (theta * (lr_p * self.weight_decay))?)?;
            }
            p.var.set(&next)?;
            *m = new_m.detach();
            *v = new_v.detach();
        }
        Ok(())
    }
}

/// `lr · decay^(L-1-layer)` multipliers for layers `0..L`.
pub fn layerwise_scales(layers: usize, decay: f64) -> Vec<f64> {
    (0..layers)
        .map(|l| decay.powi((layers - 1 - l) as i32))
        .collect()
}

/// Linear warm-up followed by half-cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, warmup_fraction: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            min_lr: 0.0,
            warmup_steps: (warmup_fraction * total_steps as f64).round() as usize,
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_layer_decay() {
        let s = layerwise_scales(3, 0.75);
        assert_eq!(s, vec![0.5625, 0.75, 1.0]);
    }

    #[test]
    fn schedule_warms_then_decays() {
        let s = CosineSchedule::new(1.0, 0.1, 100);
        assert!(s.lr(0) < s.lr(5));
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!(s.lr(99) < 0.01);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        use candle_core::DType;
        let mut p = Params::new(0, DType::F64);
        let x = p.constant("x", &[2], 3.0, 0).unwrap();
        let mut opt = AdamW::new(&p, 0.9, 0.999, 0.0).unwrap();
        for _ in 0..500 {
            let loss = x.sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step(&p, &g, 0.05).unwrap();
        }
        let v = x.to_vec1::<f64>().unwrap();
        assert!(v[0].abs() < 1e-2, "{v:?}");
    }
}
