use super::{join, LayerNorm, Linear, ParamTree};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Post-norm multi-head attention: `LN(concat(heads)·W_O + queries)`.
///
/// Used for self-attention (keys/values are the queries) and for
/// cross-attention (keys/values are frozen encoder tokens of width `kv_dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention<P> {
    pub wq: Linear<P>,
    pub wk: Linear<P>,
    pub wv: Linear<P>,
    pub wo: Linear<P>,
    pub norm: LayerNorm<P>,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl<T: Element> MultiHeadAttention<Tensor<T>> {
    pub fn new(query_dim: usize, kv_dim: usize, n_heads: usize, head_dim: usize, rng: &mut Rng) -> Self {
        let inner = n_heads * head_dim;
        MultiHeadAttention {
            wq: Linear::xavier(query_dim, inner, rng),
            wk: Linear::xavier(kv_dim, inner, rng),
            wv: Linear::xavier(kv_dim, inner, rng),
            wo: Linear::xavier(inner, query_dim, rng),
            norm: LayerNorm::new(query_dim),
            n_heads,
            head_dim,
        }
    }
}

impl<P> ParamTree<P> for MultiHeadAttention<P> {
    type Mapped<Q> = MultiHeadAttention<Q>;

    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> MultiHeadAttention<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q,
    {
        MultiHeadAttention {
            wq: self.wq.map_params(&join(path, "wq"), f),
            wk: self.wk.map_params(&join(path, "wk"), f),
            wv: self.wv.map_params(&join(path, "wv"), f),
            wo: self.wo.map_params(&join(path, "wo"), f),
            norm: self.norm.map_params(&join(path, "norm"), f),
            n_heads: self.n_heads,
            head_dim: self.head_dim,
        }
    }

    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        self.wq.visit_params_mut(f);
        self.wk.visit_params_mut(f);
        self.wv.visit_params_mut(f);
        self.wo.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }
}

impl MultiHeadAttention<Var> {
    /// `[B, N, H·d] → [B·H, N, d]`
    fn split_heads<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let x = tape.reshape(x, &[b, n, self.n_heads, self.head_dim])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * self.n_heads, n, self.head_dim])
    }

    /// Attention weights `softmax(QKᵀ/√d)`, shape `[B·H, Nq, Nkv]`.
    ///
    /// `valid_keys[b]`, when given, limits sample `b` to its first keys; the
    /// remaining positions get zero weight.
    pub fn attention_weights<T: Element>(
        &self,
        tape: &mut Tape<T>,
        queries: Var,
        keys_values: Var,
        valid_keys: Option<&[usize]>,
    ) -> Result<(Var, Var)> {
        let qs = tape.shape(queries).to_vec();
        let ks = tape.shape(keys_values).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] {
            return Err(Error::Dimension(format!(
                "attention expects [B, Nq, Hq] and [B, Nkv, Hkv], got {qs:?} and {ks:?}"
            )));
        }
        let (batch, nq, nkv) = (qs[0], qs[1], ks[1]);
        let q = self.wq.forward(tape, queries)?;
        let k = self.wk.forward(tape, keys_values)?;
        let v = self.wv.forward(tape, keys_values)?;
        let q = self.split_heads(tape, q)?;
        let k = self.split_heads(tape, k)?;
        let v = self.split_heads(tape, v)?;
        let scores = tape.batched_matmul(q, k, true)?;
        let mut scores = tape.scale(scores, 1.0 / (self.head_dim as f64).sqrt())?;
        if let Some(valid) = valid_keys {
            if valid.len() != batch || valid.iter().any(|&c| c == 0 || c > nkv) {
                return Err(Error::Dimension(format!(
                    "valid key counts {valid:?} for batch {batch} with {nkv} keys"
                )));
            }
            let mut mask = vec![T::zero(); batch * self.n_heads * nq * nkv];
            for (b, &count) in valid.iter().enumerate() {
                let block = &mut mask[b * self.n_heads * nq * nkv..(b + 1) * self.n_heads * nq * nkv];
                for row in block.chunks_exact_mut(nkv) {
                    row[count..].iter_mut().for_each(|m| *m = T::from_f64(-1e9));
                }
            }
            let mask = tape.constant(Tensor::new(&[batch * self.n_heads, nq, nkv], mask)?)?;
            scores = tape.add(scores, mask)?;
        }
        let weights = tape.softmax_lastdim(scores)?;
        Ok((weights, v))
    }

    /// Concatenated per-head outputs before the output projection,
    /// `[B, Nq, H·d]`.
    pub fn heads<T: Element>(
        &self,
        tape: &mut Tape<T>,
        queries: Var,
        keys_values: Var,
        valid_keys: Option<&[usize]>,
    ) -> Result<Var> {
        let (batch, nq) = {
            let s = tape.shape(queries);
            (s[0], s[1])
        };
        let (weights, v) = self.attention_weights(tape, queries, keys_values, valid_keys)?;
        let out = tape.batched_matmul(weights, v, false)?;
        let out = tape.reshape(out, &[batch, self.n_heads, nq, self.head_dim])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        tape.reshape(out, &[batch, nq, self.n_heads * self.head_dim])
    }

    /// `queries: [B, Nq, Hq]`, `keys_values: [B, Nkv, Hkv]` → `[B, Nq, Hq]`.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        queries: Var,
        keys_values: Var,
        valid_keys: Option<&[usize]>,
    ) -> Result<Var> {
        let heads = self.heads(tape, queries, keys_values, valid_keys)?;
        let projected = self.wo.forward(tape, heads)?;
        let residual = tape.add(projected, queries)?;
        self.norm.forward(tape, residual)
    }
}
