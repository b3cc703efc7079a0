//! Named parameter tensors and their binding onto a tape.

use std::collections::BTreeMap;

use rand::Rng;

use crate::container::{Blob, BlobError};
use crate::diffcore::{DiffError, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.map.extend(other.map);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Puts every tensor on `tape`, as leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound, DiffError> {
        let mut vars = BTreeMap::new();
        for (k, t) in &self.map {
            let v = if trainable { tape.leaf(t.clone())? } else { tape.constant(t.clone())? };
            vars.insert(k.clone(), v);
        }
        Ok(Bound { vars })
    }

    /// Stores each tensor as `{prefix}{name}`.
    pub fn store(&self, blob: &mut Blob, prefix: &str) {
        for (k, t) in &self.map {
            blob.put_f64(format!("{prefix}{k}"), t.shape(), t.data().to_vec());
        }
    }

    /// Reads back every array named `{prefix}*`.
    pub fn restore(blob: &Blob, prefix: &str) -> Result<Self, BlobError> {
        let mut out = Self::new();
        let names: Vec<String> = blob.names().filter(|n| n.starts_with(prefix)).map(str::to_owned).collect();
        for n in names {
            let (shape, data) = blob.f64s(&n)?;
            let t = Tensor::new(shape.to_vec(), data.to_vec())
                .map_err(|e| BlobError::Manifest(format!("{n}: {e}")))?;
            out.insert(&n[prefix.len()..], t);
        }
        Ok(out)
    }

    /// Gradient of every parameter, zero where unused.
    pub fn gradients(&self, bound: &Bound, tape: &Tape, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in &bound.vars {
            out.insert(k.clone(), grads.wrt(tape, *v));
        }
        out
    }
}

/// Parameter name → tape variable.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var, DiffError> {
        self.vars.get(name).copied().ok_or_else(|| DiffError::Invalid { op: "param", detail: format!("missing `{name}`") })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Uniform `±gain·sqrt(3/fan_in)`, i.e. variance `gain²/fan_in`.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
}
