//! Named parameter storage and the layer building blocks.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{ConvGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Flat, ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<S>>>,
    index: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// `(name, shape)` for every parameter, in registration order.
    pub fn census(&self) -> Vec<(String, Vec<usize>)> {
        self.names.iter().zip(&self.values).map(|(n, v)| (n.clone(), v.shape().to_vec())).collect()
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        if self.get(id).shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.get(id).shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub(crate) fn shared_values(&self) -> Vec<Arc<Tensor<S>>> {
        self.values.clone()
    }
}

fn fan_in_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[cout, cin, geom.k, geom.k], cin * geom.k * geom.k, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Conv2d { weight, bias, geom }
    }

    pub fn pointwise<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, cin, cout, ConvGeom { k: 1, stride: 1, pad: 0 }, rng)
    }

    pub fn forward<'t, S: Scalar>(&self, x: Var<'t, S>) -> Var<'t, S> {
        let tape = x.tape();
        x.conv2d(tape.param(self.weight), self.bias.map(|b| tape.param(b)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeom,
}

impl ConvTranspose2d {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[cin, cout, geom.k, geom.k], cin * geom.k * geom.k, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvTranspose2d { weight, bias, geom }
    }

    pub fn forward<'t, S: Scalar>(&self, x: Var<'t, S>) -> Var<'t, S> {
        let tape = x.tape();
        x.conv_transpose2d(tape.param(self.weight), Some(tape.param(self.bias)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        fin: usize,
        fout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), fan_in_uniform(&[fout, fin], fin, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fout]));
        Linear { weight, bias }
    }

    pub fn forward<'t, S: Scalar>(&self, x: Var<'t, S>) -> Var<'t, S> {
        let tape = x.tape();
        x.linear(tape.param(self.weight), tape.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], S::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        GroupNorm { gamma, beta, groups: Self::groups_for(channels) }
    }

    /// Largest of 8, 4, 2 that leaves at least two channels per group.
    pub fn groups_for(channels: usize) -> usize {
        [8, 4, 2].into_iter().find(|&g| channels % g == 0 && channels / g >= 2).unwrap_or(1)
    }

    pub fn forward<'t, S: Scalar>(&self, x: Var<'t, S>) -> Var<'t, S> {
        let tape = x.tape();
        x.group_norm(tape.param(self.gamma), tape.param(self.beta), self.groups)
    }
}

/// Zero-filled constant shaped like a batch of feature maps.
pub fn zeros_like_batch<'t, S: Scalar>(tape: &'t Tape<S>, shape: &[usize]) -> Var<'t, S> {
    tape.constant(Tensor::zeros(shape))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_registration_and_census() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rand::thread_rng();
        Conv2d::pointwise(&mut store, "a", 3, 4, &mut rng);
        Linear::new(&mut store, "b", 5, 2, &mut rng);
        assert_eq!(store.len(), 4);
        assert_eq!(store.census()[0], ("a.weight".to_string(), vec![4, 3, 1, 1]));
        assert_eq!(store.find("b.bias"), Some(ParamId(3)));
        assert_eq!(store.numel(), 12 + 4 + 10 + 2);
        assert!(store.set("b.bias", Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn group_choice() {
        assert_eq!(GroupNorm::groups_for(256), 8);
        assert_eq!(GroupNorm::groups_for(8), 4);
        assert_eq!(GroupNorm::groups_for(4), 2);
        assert_eq!(GroupNorm::groups_for(3), 1);
    }
}
