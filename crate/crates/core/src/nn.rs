//! Named parameter tensors and the small layer helpers built on them.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    pub tensors: IndexMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Adds the entries of `other`, refusing duplicate names.
    pub fn merge(&mut self, other: Params) -> Result<()> {
        for (k, v) in other.tensors {
            if self.tensors.contains_key(&k) {
                return Err(contract(format!("duplicate parameter name {k}")));
            }
            self.tensors.insert(k, v);
        }
        Ok(())
    }

    /// Places every tensor on the graph as a differentiable input.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.input(v.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a [`Params`] set.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    /// Gradients keyed by parameter name.
    pub fn grads(&self, grads: &Gradients) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get(v)))
            .collect()
    }
}

/// Adds a dense layer `prefix.w [fan_in, fan_out]`, `prefix.b [1, fan_out]`.
///
/// Weights are uniform in `±1/sqrt(fan_in)`; `zero` gives an all-zero layer.
pub fn init_linear(p: &mut Params, prefix: &str, fan_in: usize, fan_out: usize, zero: bool, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = if zero {
        Tensor::zeros(&[fan_in, fan_out])
    } else {
        Tensor::new(
            &[fan_in, fan_out],
            (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect(),
        )
    };
    let b = if zero {
        Tensor::zeros(&[1, fan_out])
    } else {
        Tensor::new(&[1, fan_out], (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect())
    };
    p.insert(format!("{prefix}.w"), w);
    p.insert(format!("{prefix}.b"), b);
}

/// `x W + b` for the layer registered under `prefix`.
pub fn linear(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Var {
    let w = b.var(&format!("{prefix}.w"));
    let bias = b.var(&format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_layer_forward_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Params::new();
        init_linear(&mut p, "l", 2, 3, false, &mut rng);
        *p.get_mut("l.w") = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        *p.get_mut("l.b") = Tensor::row(vec![0.5, 0.0, -0.5]);
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let x = g.constant(Tensor::row(vec![1.0, -1.0]));
        let y = linear(&mut g, &bound, "l", x);
        assert_eq!(g.value(y).data(), &[-2.5, -3.0, -3.5]);
        let s = g.sum(y);
        let grads = bound.grads(&g.backward(s).unwrap());
        assert_eq!(grads["l.w"].data(), &[1.0, 1.0, 1.0, -1.0, -1.0, -1.0]);
        assert_eq!(grads["l.b"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn zero_layers_and_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = Params::new();
        init_linear(&mut a, "x", 4, 2, true, &mut rng);
        assert_eq!(a.get("x.w").max_abs(), 0.0);
        let mut b = Params::new();
        init_linear(&mut b, "x", 1, 1, false, &mut rng);
        assert!(a.clone().merge(b).is_err());
        assert_eq!(a.num_values(), 10);
    }
}
