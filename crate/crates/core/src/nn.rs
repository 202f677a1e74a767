//! Named parameter storage, tape binding and the convolutional building blocks
//! shared by the encoders, decoders and discriminator.

use std::collections::BTreeMap;

use rand::Rng;

use crate::graph::{Gradients, Tape, Var};
use crate::tensor::{Float, Tensor};

/// Trainable tensors keyed by dotted name. Iteration order is sorted by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Inserts every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    pub fn bitwise_eq(&self, other: &ParamStore<T>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, va), (kb, vb))| ka == kb && va.bitwise_eq(vb))
    }

    /// Places every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }

    /// Places every tensor on the tape as a constant (frozen model).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }
}

/// Tape variables for a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients for every bound parameter; `None` where no path exists.
    pub fn collect_grads<T: Float>(&self, grads: &Gradients<T>) -> BTreeMap<String, Option<Tensor<T>>> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get(v).cloned()))
            .collect()
    }
}

// ---- initialisation ------------------------------------------------------------

/// He-normal convolution weight `[out, in, k, k]` with zero bias.
pub fn init_conv<T: Float>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
    rng: &mut impl Rng,
) {
    let fan_in = (cin * k * k) as f64;
    let std = gain * (2.0 / fan_in).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[cout, cin, k, k], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Normal(0, 0.02) linear weight `[in, out]` with zero bias.
pub fn init_linear<T: Float>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    std: f64,
    rng: &mut impl Rng,
) {
    store.insert(format!("{name}.w"), Tensor::randn(&[cin, cout], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub fn init_layer_norm<T: Float>(store: &mut ParamStore<T>, name: &str, width: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[width], T::one()));
    store.insert(format!("{name}.b"), Tensor::zeros(&[width]));
}

/// Residual block `x + conv(silu(conv(silu(x))))`, both convolutions 3x3.
pub fn init_res_block<T: Float>(store: &mut ParamStore<T>, name: &str, ch: usize, rng: &mut impl Rng) {
    init_conv(store, &format!("{name}.conv1"), ch, ch, 3, 1.0, rng);
    init_conv(store, &format!("{name}.conv2"), ch, ch, 3, 0.1, rng);
}

// ---- forward helpers -----------------------------------------------------------

pub fn conv<T: Float>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    tape.conv2d(x, w, b, stride, pad)
}

pub fn linear<T: Float>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Var {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    tape.linear(x, w, b)
}

pub fn layer_norm<T: Float>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Var {
    let g = p.var(&format!("{name}.g"));
    let b = p.var(&format!("{name}.b"));
    tape.layer_norm(x, g, b, T::from_f64_lossy(1e-5))
}

pub fn res_block<T: Float>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Var {
    let h = tape.silu(x);
    let h = conv(tape, p, &format!("{name}.conv1"), h, 1, 1);
    let h = tape.silu(h);
    let h = conv(tape, p, &format!("{name}.conv2"), h, 1, 1);
    tape.add(x, h)
}

/// Models whose trainable tensors are addressable by the names used when binding.
pub trait Parameterized<T: Float> {
    /// Binds every trainable tensor as a tape parameter.
    fn bind_params(&self, tape: &mut Tape<T>) -> Bound;

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>>;

    /// One optimizer step; names with a `None` gradient stay untouched.
    fn apply_grads(&mut self, opt: &mut crate::optim::Adam<T>, grads: &BTreeMap<String, Option<Tensor<T>>>) {
        for (name, g) in grads {
            let p = self
                .param_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            opt.update(name, p, g.as_ref());
        }
    }
}
