//! Layers used by the query transformer.
//!
//! Every layer struct is generic over its parameter storage `P`: at rest it
//! holds `Tensor<T>`, and for a forward pass it is mapped to `Var` handles on
//! a tape with [`ParamTree::map_params`]. The visit order of `map_params` is
//! the canonical parameter order used by the optimizer and checkpoints.

mod attention;
mod feed_forward;

pub use attention::MultiHeadAttention;
pub use feed_forward::FeedForward;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor, Var};

/// A tree of named parameters.
pub trait ParamTree<P> {
    type Mapped<Q>;

    /// Rebuild the tree with every parameter replaced by `f(name, param)`,
    /// visiting in canonical order.
    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> Self::Mapped<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q;

    /// Visit every parameter mutably, in canonical order.
    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F);
}

impl<P, X: ParamTree<P>> ParamTree<P> for Option<X> {
    type Mapped<Q> = Option<X::Mapped<Q>>;

    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> Self::Mapped<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q,
    {
        self.as_ref().map(|x| x.map_params(path, f))
    }

    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        if let Some(x) = self {
            x.visit_params_mut(f);
        }
    }
}

/// Elements are named by index: `path.0`, `path.1`, ...
impl<P, X: ParamTree<P>> ParamTree<P> for Vec<X> {
    type Mapped<Q> = Vec<X::Mapped<Q>>;

    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> Self::Mapped<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q,
    {
        self.iter()
            .enumerate()
            .map(|(i, x)| x.map_params(&join(path, &i.to_string()), f))
            .collect()
    }

    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        for x in self {
            x.visit_params_mut(f);
        }
    }
}

pub(crate) fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

/// Affine map `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

impl<T: Element> Linear<Tensor<T>> {
    /// Xavier-uniform weight, zero bias.
    pub fn xavier(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w: Vec<T> = (0..in_dim * out_dim)
            .map(|_| T::from_f64(rng.uniform_range(-bound, bound)))
            .collect();
        Linear {
            weight: Tensor::new(&[in_dim, out_dim], w).expect("linear weight"),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl<P> ParamTree<P> for Linear<P> {
    type Mapped<Q> = Linear<Q>;

    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> Linear<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q,
    {
        Linear {
            weight: f(&join(path, "weight"), &self.weight),
            bias: f(&join(path, "bias"), &self.bias),
        }
    }

    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl Linear<Var> {
    /// `x: [.., in] → [.., out]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (in_dim, out_dim) = {
            let w = tape.shape(self.weight);
            (w[0], w[1])
        };
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&in_dim) {
            return Err(Error::Dimension(format!(
                "linear expects last dim {in_dim}, got {shape:?}"
            )));
        }
        let rows = shape.iter().product::<usize>() / in_dim;
        let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, in_dim])? };
        let y = tape.matmul(flat, self.weight)?;
        let y = tape.add_row(y, self.bias)?;
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_dim;
        tape.reshape(y, &out_shape)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with learnable `gamma`, `beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<P> {
    pub gamma: P,
    pub beta: P,
    pub eps: f64,
}

impl<T: Element> LayerNorm<Tensor<T>> {
    /// `gamma = 1`, `beta = 0`.
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[dim], T::one()),
            beta: Tensor::zeros(&[dim]),
            eps: LAYER_NORM_EPS,
        }
    }
}

impl<P> ParamTree<P> for LayerNorm<P> {
    type Mapped<Q> = LayerNorm<Q>;

    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> LayerNorm<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q,
    {
        LayerNorm {
            gamma: f(&join(path, "gamma"), &self.gamma),
            beta: f(&join(path, "beta"), &self.beta),
            eps: self.eps,
        }
    }

    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

impl LayerNorm<Var> {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let dim = tape.shape(self.gamma)[0];
        if tape.shape(x).last() != Some(&dim) {
            return Err(Error::Dimension(format!(
                "layer norm over {dim} features, input {:?}",
                tape.shape(x)
            )));
        }
        let n = tape.normalize_lastdim(x, self.eps)?;
        let s = tape.mul_row(n, self.gamma)?;
        tape.add_row(s, self.beta)
    }
}

/// Register every parameter of `tree` on `tape` as a trainable leaf.
pub fn bind<T, M>(tree: &M, tape: &mut Tape<T>) -> Result<M::Mapped<Var>>
where
    T: Element,
    M: ParamTree<Tensor<T>>,
{
    let mut err = None;
    let bound = tree.map_params("", &mut |_, p: &Tensor<T>| match tape.param(p.clone()) {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            // placeholder; the error is returned below
            Var::placeholder()
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(bound),
    }
}

/// Like [`bind`], but parameters are constants (no gradients recorded).
pub fn bind_frozen<T, M>(tree: &M, tape: &mut Tape<T>) -> Result<M::Mapped<Var>>
where
    T: Element,
    M: ParamTree<Tensor<T>>,
{
    let mut err = None;
    let bound = tree.map_params("", &mut |_, p: &Tensor<T>| match tape.constant(p.clone()) {
        Ok(v) => v,
        Err(e) => {
            err.get_or_insert(e);
            Var::placeholder()
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(bound),
    }
}

/// Parameters of `tree` in canonical order with their dotted names.
pub fn named_params<'a, P, M: ParamTree<P>>(tree: &'a M) -> Vec<(String, &'a P)>
where
    P: 'a,
{
    let mut out = Vec::new();
    tree.map_params("", &mut |name, p| out.push((name.to_string(), p)));
    out
}
