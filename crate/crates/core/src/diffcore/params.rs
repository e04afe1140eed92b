//! Persistent parameter storage, shared across tapes and optimizer steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;

/// Stable handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Model weights and architecture mixing weights are optimized on different
/// data splits, so the store tags every parameter with its role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Model,
    Arch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        for (gi, v) in self.grad.iter_mut().zip(g) {
            *gi += v;
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad {
            *g = 0.0;
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter {name}: shape/data mismatch");
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            kind,
            shape,
            data,
            grad: vec![0.0; numel],
        });
        id
    }

    pub fn add_zeros(&mut self, name: &str, kind: ParamKind, shape: Vec<usize>) -> ParamId {
        let numel = shape.iter().product();
        self.add(name, kind, shape, vec![0.0; numel])
    }

    /// Uniform init on [-bound, bound], the usual fan-in scaling for linear
    /// maps: bound = 1/sqrt(fan_in).
    pub fn add_uniform(
        &mut self,
        name: &str,
        kind: ParamKind,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut Prng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.uniform(-bound, bound)).collect();
        self.add(name, kind, shape, data)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_of_kind(&self, kind: ParamKind) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].kind == kind)
            .map(ParamId)
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn total_numel_of_kind(&self, kind: ParamKind) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.numel())
            .sum()
    }

    /// Flatten values of the given ids in order (used by checkpoints and
    /// finite-difference checks).
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(&self.params[id.0].data);
        }
        out
    }

    pub fn unflatten(&mut self, ids: &[ParamId], flat: &[f64]) -> Result<()> {
        let want: usize = ids.iter().map(|&id| self.params[id.0].numel()).sum();
        if flat.len() != want {
            return Err(Error::state(format!(
                "expected {want} values to restore {} parameters, got {}",
                ids.len(),
                flat.len()
            )));
        }
        let mut off = 0;
        for &id in ids {
            let p = &mut self.params[id.0];
            let n = p.numel();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
