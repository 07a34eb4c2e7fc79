//! Flat, ordered collections of named parameter tensors.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Shallow prefix of the first `n` parameters.
    pub fn prefix(&self, n: usize) -> ParamSet {
        ParamSet {
            names: self.names[..n].to_vec(),
            tensors: self.tensors[..n].to_vec(),
        }
    }

    /// Same names and shapes (in order).
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Adds every parameter to `g` as a leaf, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.trainable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Replaces the tensor with `name`, checking its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if self.tensors[id.0].shape() != t.shape() {
            return Err(shape_err!(
                "parameter {name}: expected {:?}, found {:?}",
                self.tensors[id.0].shape(),
                t.shape()
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, so the set survives a
    /// single-precision checkpoint unchanged.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            round_f32(t.data_mut());
        }
    }
}

pub(crate) fn round_f32(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

/// Uniform `±1/sqrt(fan_in)` weights, values rounded to `f32`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| rng.random_range(-bound..bound) as f32 as f64)
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Registers a conv weight `[out, in/groups, k, k]` and bias `[out]`.
pub(crate) fn push_conv<R: Rng + ?Sized>(
    set: &mut ParamSet,
    rng: &mut R,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    groups: usize,
) -> (ParamId, ParamId) {
    let fan_in = cin / groups * k * k;
    let w = set.push(
        format!("{name}.weight"),
        uniform_init(rng, &[cout, cin / groups, k, k], fan_in),
    );
    let b = set.push(format!("{name}.bias"), uniform_init(rng, &[cout], fan_in));
    (w, b)
}

/// Registers a dense layer `[out, in]` and bias `[out]`.
pub(crate) fn push_linear<R: Rng + ?Sized>(
    set: &mut ParamSet,
    rng: &mut R,
    name: &str,
    din: usize,
    dout: usize,
) -> (ParamId, ParamId) {
    let w = set.push(
        format!("{name}.weight"),
        uniform_init(rng, &[dout, din], din),
    );
    let b = set.push(format!("{name}.bias"), uniform_init(rng, &[dout], din));
    (w, b)
}
