//! Named parameter storage and the affine layer shared by every module.

use rand::Rng;

use crate::autograd::{Gradients, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
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

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces every tensor by name from `other`; shapes must match.
    pub fn load_from<'a>(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<&'a Tensor>,
    ) -> Result<(), String> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = lookup(name).ok_or_else(|| format!("missing parameter {name}"))?;
            if src.shape != t.shape {
                return Err(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    src.shape, t.shape
                ));
            }
            t.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t)).collect(),
        }
    }

    /// Gradients of every parameter (zeros where the graph did not touch it).
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, v)| grads.take(*v).unwrap_or_else(|| vec![0.0; t.len()]))
            .collect()
    }
}

/// Graph handles of a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Uniform initialization with zero mean and the given variance.
pub fn uniform_with_variance(rng: &mut impl Rng, shape: Vec<usize>, variance: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let a = (3.0 * variance).sqrt();
    let data = if a == 0.0 {
        vec![0.0; n]
    } else {
        (0..n).map(|_| rng.gen_range(-a..a)).collect()
    };
    Tensor::new(shape, data)
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Fan-in scaled initialization (variance `gain / fan_in`), zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_with_variance(rng, vec![fan_in, fan_out], gain / fan_in as f64),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let y = g.matmul(x, bound.var(self.weight));
        match self.bias {
            Some(b) => g.add_row(y, bound.var(b)),
            None => y,
        }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data.fill(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).data.fill(0.0);
        }
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::new(vec![dim], vec![1.0; dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, x: Var) -> Var {
        let n = g.layer_norm_rows(x, Self::EPS);
        let s = g.mul_row(n, bound.var(self.gain));
        g.add_row(s, bound.var(self.bias))
    }
}
