//! Named trainable parameters and the small layers built from them.

use rand::Rng;

use crate::error::{contract, Result};
use crate::tensor::{linear, Scalar, Tape, Tensor, Var};

pub const LN_EPS: Scalar = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Multiplicative normalization gain, initialized to one.
    Gain,
    Embedding,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let Some(id) = self.find(name) else {
            return contract(format!("unknown parameter {name}"));
        };
        if self.values[id.0].shape() != value.shape() {
            return contract(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                self.values[id.0].shape()
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Zeroes every weight and bias; gains and embeddings are left alone.
    pub fn zero_weights(&mut self) {
        for (v, k) in self.values.iter_mut().zip(&self.kinds) {
            if matches!(k, ParamKind::Weight | ParamKind::Bias) {
                v.data_mut().fill(0.0);
            }
        }
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Puts every parameter on `tape` without gradient tracking.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (cin as Scalar).sqrt();
        let w = store.add(format!("{name}.weight"), ParamKind::Weight, Tensor::uniform(&[cin, cout], -bound, bound, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::uniform(&[cout], -bound, bound, rng)));
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let w = store.add(format!("{name}.weight"), ParamKind::Weight, Tensor::zeros(&[cin, cout]));
        let b = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout])));
        Self { w, b }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        linear(x, p.get(self.w), self.b.map(|b| p.get(b)))
    }
}

/// Layer norm over the last axis with learnable gain and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Gain, Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), ParamKind::Bias, Tensor::zeros(&[c])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(Some(p.get(self.gamma)), Some(p.get(self.beta)), LN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        // He-style scale for ReLU stacks.
        let std = (2.0 / (cin * k * k) as Scalar).sqrt();
        Self {
            w: store.add(format!("{name}.weight"), ParamKind::Weight, Tensor::randn(&[cout, cin, k, k], std, rng)),
            b: store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[cout])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p.get(self.w), Some(p.get(self.b)), self.stride, self.pad)
    }
}

/// `Linear -> ReLU -> Linear`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.fc2.forward(p, self.fc1.forward(p, x)?.relu()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_binding_and_zeroing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::default();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, &mut rng);
        let ln = LayerNorm::new(&mut store, "ln", 2);
        assert_eq!(store.len(), 4);
        assert_eq!(store.num_scalars(), 6 + 2 + 2 + 2);
        assert_eq!(store.name(lin.w), "fc.weight");
        assert!(store.set("fc.bias", Tensor::zeros(&[3])).is_err());
        store.zero_weights();
        assert!(store.get(lin.w).data().iter().all(|&v| v == 0.0));
        assert_eq!(store.get(ln.gamma).data(), &[1.0, 1.0]);

        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::ones(&[4, 3]));
        let y = ln.forward(&p, lin.forward(&p, x).unwrap()).unwrap();
        assert_eq!(y.shape(), vec![4, 2]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert!(g.get(p.get(lin.w)).is_some());
    }
}
