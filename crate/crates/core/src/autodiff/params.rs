use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named learnable tensors plus gradient accumulators of identical shape.
///
/// Names are kept in sorted order, which is also the order parameters are
/// written to checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let grad = value.zeros_like();
        self.params.insert(name, Parameter { value, grad });
        Ok(())
    }

    /// Glorot-uniform weight matrix `rows × cols`.
    pub fn insert_glorot(&mut self, name: &str, rows: usize, cols: usize, stream: RngStream) -> Result<()> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = stream.named(name).rng();
        let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn insert_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, stream: RngStream) -> Result<()> {
        let mut rng = stream.named(name).rng();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.grad)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if !p.value.same_shape(&value) {
            return Err(Error::shape(
                "set_value",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn accumulate(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = p.value.zeros_like();
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Copy values (not gradients) for every name present in both stores.
    pub fn copy_values_from(&mut self, other: &ParameterStore, prefix: &str) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(src) = other.params.get(name) {
                if src.value.same_shape(&p.value) {
                    p.value = src.value.clone();
                    n += 1;
                }
            }
        }
        n
    }
}
