use super::{join, LayerNorm, Linear, ParamTree};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Post-norm MLP sublayer: `LN(fc2(gelu(fc1(x))) + x)`, hidden width `4·dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<P> {
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
    pub norm: LayerNorm<P>,
}

pub const FF_EXPANSION: usize = 4;

impl<T: Element> FeedForward<Tensor<T>> {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        FeedForward {
            fc1: Linear::xavier(dim, FF_EXPANSION * dim, rng),
            fc2: Linear::xavier(FF_EXPANSION * dim, dim, rng),
            norm: LayerNorm::new(dim),
        }
    }
}

impl<P> ParamTree<P> for FeedForward<P> {
    type Mapped<Q> = FeedForward<Q>;

    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> FeedForward<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q,
    {
        FeedForward {
            fc1: self.fc1.map_params(&join(path, "fc1"), f),
            fc2: self.fc2.map_params(&join(path, "fc2"), f),
            norm: self.norm.map_params(&join(path, "norm"), f),
        }
    }

    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }
}

impl FeedForward<Var> {
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        let h = self.fc2.forward(tape, h)?;
        let r = tape.add(h, x)?;
        self.norm.forward(tape, r)
    }
}
