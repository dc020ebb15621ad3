use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// One trainable tensor with its optimizer grouping.
#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    /// Depth index used for layer-wise learning-rate decay (0 = input side).
    pub layer: usize,
    /// Whether weight decay applies (false for biases, norms and tokens).
    pub decay: bool,
}

/// Ordered collection of named parameters with deterministic initialization.
pub struct Params {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl Params {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    fn push(&mut self, name: &str, values: Vec<f64>, shape: &[usize], layer: usize, decay: bool) -> Result<Tensor> {
        if self.get(name).is_some() {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.params.push(Param {
            name: name.to_string(),
            var,
            layer,
            decay,
        });
        Ok(out)
    }

    /// Normal(0, std) truncated to ±2 std.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64, layer: usize, decay: bool) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let z: f64 = normal.sample(&mut self.rng);
            if z.abs() <= 2.0 {
                values.push(z * std);
            }
        }
        self.push(name, values, shape, layer, decay)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, layer: usize) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.push(name, vec![value; n], shape, layer, false)
    }

    pub fn to_map(&self) -> HashMap<String, Tensor> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.var.as_tensor().clone()))
            .collect()
    }

    /// Copies of the current values, usable to restore later.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        Ok(self
            .params
            .iter()
            .map(|p| p.var.as_tensor().copy())
            .collect::<candle_core::Result<_>>()?)
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::Checkpoint("snapshot size mismatch".into()));
        }
        for (p, t) in self.params.iter().zip(snapshot) {
            p.var.set(t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map = self.to_map();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads every parameter whose name appears in the file. With
    /// `strict`, missing or mis-shaped entries are errors; otherwise they are
    /// skipped and their names returned.
    pub fn load(&self, path: &Path, strict: bool) -> Result<Vec<String>> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        self.load_map(&tensors, strict)
    }

    pub fn load_map(&self, tensors: &HashMap<String, Tensor>, strict: bool) -> Result<Vec<String>> {
        let mut skipped = Vec::new();
        for p in &self.params {
            match tensors.get(&p.name) {
                Some(t) if t.dims() == p.var.as_tensor().dims() => {
                    p.var.set(&t.to_dtype(self.dtype)?)?;
                }
                Some(t) if strict => {
                    return Err(Error::Checkpoint(format!(
                        "{}: expected shape {:?}, found {:?}",
                        p.name,
                        p.var.as_tensor().dims(),
                        t.dims()
                    )))
                }
                None if strict => {
                    return Err(Error::Checkpoint(format!("missing parameter {}", p.name)))
                }
                _ => skipped.push(p.name.clone()),
            }
        }
        Ok(skipped)
    }

    /// Largest layer index plus one.
    pub fn num_layers(&self) -> usize {
        self.params.iter().map(|p| p.layer + 1).max().unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.var.as_tensor().elem_count()).sum()
    }
}
