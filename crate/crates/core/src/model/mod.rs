//! The query transformer: learnable queries per modality, a stack of
//! interaction blocks and the distribution head.

mod config;

pub use config::{parse_kv, Modality, ModelConfig, ShareMode};

use crate::error::{Error, Result};
use crate::nn::{bind, bind_frozen, join, named_params, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamTree};
use crate::rng::Rng;
use crate::tensor::{Element, Tape, Tensor, Var};

pub const QUERY_INIT_STD: f64 = 0.02;

/// Learnable query embeddings of one modality and the layer norm applied to
/// them before the first block.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryStream<P> {
    /// `[n_queries, h_q]`
    pub embeddings: P,
    pub pre_norm: LayerNorm<P>,
}

impl<P> ParamTree<P> for QueryStream<P> {
    type Mapped<Q> = QueryStream<Q>;

    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> QueryStream<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q,
    {
        QueryStream {
            embeddings: f(&join(path, "embeddings"), &self.embeddings),
            pre_norm: self.pre_norm.map_params(&join(path, "pre_norm"), f),
        }
    }

    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        f(&mut self.embeddings);
        self.pre_norm.visit_params_mut(f);
    }
}

/// A sublayer whose weights may be absent, shared by both query streams, or
/// held separately per stream.
#[derive(Clone, Debug, PartialEq)]
pub enum Sublayer<X> {
    Absent,
    Shared(X),
    Separate { visual: Option<X>, textual: Option<X> },
}

impl<X> Sublayer<X> {
    fn build(mode: ShareMode, modality: Modality, mut make: impl FnMut() -> X) -> Self {
        match mode {
            ShareMode::None => Sublayer::Absent,
            ShareMode::Shared => Sublayer::Shared(make()),
            ShareMode::Separate => {
                let visual = modality.has_visual().then(&mut make);
                let textual = modality.has_textual().then(&mut make);
                Sublayer::Separate { visual, textual }
            }
        }
    }

    pub fn mode(&self) -> ShareMode {
        match self {
            Sublayer::Absent => ShareMode::None,
            Sublayer::Shared(_) => ShareMode::Shared,
            Sublayer::Separate { .. } => ShareMode::Separate,
        }
    }
}

impl<P, X: ParamTree<P>> ParamTree<P> for Sublayer<X> {
    type Mapped<Q> = Sublayer<X::Mapped<Q>>;

    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> Self::Mapped<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q,
    {
        match self {
            Sublayer::Absent => Sublayer::Absent,
            Sublayer::Shared(x) => Sublayer::Shared(x.map_params(&join(path, "shared"), f)),
            Sublayer::Separate { visual, textual } => Sublayer::Separate {
                visual: visual.map_params(&join(path, "visual"), f),
                textual: textual.map_params(&join(path, "textual"), f),
            },
        }
    }

    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        match self {
            Sublayer::Absent => {}
            Sublayer::Shared(x) => x.visit_params_mut(f),
            Sublayer::Separate { visual, textual } => {
                visual.visit_params_mut(f);
                textual.visit_params_mut(f);
            }
        }
    }
}

/// One interaction block: optional self-attention among the queries,
/// per-modality cross-attention to the frozen tokens, optional feed-forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub sa: Sublayer<MultiHeadAttention<P>>,
    pub ca_v: Option<MultiHeadAttention<P>>,
    pub ca_t: Option<MultiHeadAttention<P>>,
    pub ff: Sublayer<FeedForward<P>>,
}

impl<T: Element> Block<Tensor<T>> {
    fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (h, nh, d) = (cfg.h_q, cfg.n_heads, cfg.head_dim);
        let sa = Sublayer::build(cfg.sa_mode, cfg.modality, || MultiHeadAttention::new(h, h, nh, d, rng));
        let ca_v = cfg.modality.has_visual().then(|| MultiHeadAttention::new(h, cfg.h_v, nh, d, rng));
        let ca_t = cfg.modality.has_textual().then(|| MultiHeadAttention::new(h, cfg.h_t, nh, d, rng));
        let ff = Sublayer::build(cfg.ff_mode, cfg.modality, || FeedForward::new(h, rng));
        Block { sa, ca_v, ca_t, ff }
    }
}

impl<P> ParamTree<P> for Block<P> {
    type Mapped<Q> = Block<Q>;

    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> Block<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q,
    {
        Block {
            sa: self.sa.map_params(&join(path, "sa"), f),
            ca_v: self.ca_v.map_params(&join(path, "ca_v"), f),
            ca_t: self.ca_t.map_params(&join(path, "ca_t"), f),
            ff: self.ff.map_params(&join(path, "ff"), f),
        }
    }

    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        self.sa.visit_params_mut(f);
        self.ca_v.visit_params_mut(f);
        self.ca_t.visit_params_mut(f);
        self.ff.visit_params_mut(f);
    }
}

/// Query states of both streams, `[B, n, h_q]` each. A dropped modality is `None`.
#[derive(Clone, Copy, Debug)]
pub struct Streams {
    pub visual: Option<Var>,
    pub textual: Option<Var>,
}

impl Block<Var> {
    /// `visual_tokens` / `textual_tokens` are the frozen features,
    /// `text_valid` the optional per-sample key count for textual attention.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        q: Streams,
        visual_tokens: Var,
        textual_tokens: Var,
        text_valid: Option<&[usize]>,
    ) -> Result<Streams> {
        let mut q = match &self.sa {
            Sublayer::Absent => q,
            Sublayer::Shared(sa) => match (q.visual, q.textual) {
                (Some(v), Some(t)) => {
                    let (nv, nt) = (tape.shape(v)[1], tape.shape(t)[1]);
                    let joint = tape.concat(&[v, t], 1)?;
                    let joint = sa.forward(tape, joint, joint, None)?;
                    let parts = tape.split(joint, &[nv, nt], 1)?;
                    Streams { visual: Some(parts[0]), textual: Some(parts[1]) }
                }
                (v, t) => Streams {
                    visual: v.map(|v| sa.forward(tape, v, v, None)).transpose()?,
                    textual: t.map(|t| sa.forward(tape, t, t, None)).transpose()?,
                },
            },
            Sublayer::Separate { visual, textual } => Streams {
                visual: apply_self(tape, visual.as_ref(), q.visual)?,
                textual: apply_self(tape, textual.as_ref(), q.textual)?,
            },
        };

        if let (Some(ca), Some(v)) = (&self.ca_v, q.visual) {
            q.visual = Some(ca.forward(tape, v, visual_tokens, None)?);
        }
        if let (Some(ca), Some(t)) = (&self.ca_t, q.textual) {
            q.textual = Some(ca.forward(tape, t, textual_tokens, text_valid)?);
        }

        match &self.ff {
            Sublayer::Absent => Ok(q),
            Sublayer::Shared(ff) => Ok(Streams {
                visual: q.visual.map(|v| ff.forward(tape, v)).transpose()?,
                textual: q.textual.map(|t| ff.forward(tape, t)).transpose()?,
            }),
            Sublayer::Separate { visual, textual } => Ok(Streams {
                visual: apply_ff(tape, visual.as_ref(), q.visual)?,
                textual: apply_ff(tape, textual.as_ref(), q.textual)?,
            }),
        }
    }
}

fn apply_self<T: Element>(
    tape: &mut Tape<T>,
    layer: Option<&MultiHeadAttention<Var>>,
    x: Option<Var>,
) -> Result<Option<Var>> {
    match (layer, x) {
        (Some(l), Some(x)) => Ok(Some(l.forward(tape, x, x, None)?)),
        (_, x) => Ok(x),
    }
}

fn apply_ff<T: Element>(tape: &mut Tape<T>, layer: Option<&FeedForward<Var>>, x: Option<Var>) -> Result<Option<Var>> {
    match (layer, x) {
        (Some(l), Some(x)) => Ok(Some(l.forward(tape, x)?)),
        (_, x) => Ok(x),
    }
}

/// All trainable parameters, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct MmlqParams<P> {
    pub visual_queries: Option<QueryStream<P>>,
    pub textual_queries: Option<QueryStream<P>>,
    pub blocks: Vec<Block<P>>,
    /// `[m·h_q → h_q]` where `m` is the number of query streams.
    pub head_fc1: Linear<P>,
    pub head_fc2: Linear<P>,
}

impl<P> ParamTree<P> for MmlqParams<P> {
    type Mapped<Q> = MmlqParams<Q>;

    fn map_params<'a, Q, F>(&'a self, path: &str, f: &mut F) -> MmlqParams<Q>
    where
        P: 'a,
        F: FnMut(&str, &'a P) -> Q,
    {
        MmlqParams {
            visual_queries: self.visual_queries.map_params(&join(path, "visual_queries"), f),
            textual_queries: self.textual_queries.map_params(&join(path, "textual_queries"), f),
            blocks: self.blocks.map_params(&join(path, "blocks"), f),
            head_fc1: self.head_fc1.map_params(&join(path, "head_fc1"), f),
            head_fc2: self.head_fc2.map_params(&join(path, "head_fc2"), f),
        }
    }

    fn visit_params_mut<F: FnMut(&mut P)>(&mut self, f: &mut F) {
        self.visual_queries.visit_params_mut(f);
        self.textual_queries.visit_params_mut(f);
        self.blocks.visit_params_mut(f);
        self.head_fc1.visit_params_mut(f);
        self.head_fc2.visit_params_mut(f);
    }
}

impl MmlqParams<Var> {
    /// Broadcast the queries over the batch and apply their pre-norms.
    pub fn initial_streams<T: Element>(&self, tape: &mut Tape<T>, batch: usize) -> Result<Streams> {
        let mut start = |qs: &Option<QueryStream<Var>>| -> Result<Option<Var>> {
            match qs {
                None => Ok(None),
                Some(qs) => {
                    let e = tape.repeat_leading(qs.embeddings, batch)?;
                    Ok(Some(qs.pre_norm.forward(tape, e)?))
                }
            }
        };
        Ok(Streams { visual: start(&self.visual_queries)?, textual: start(&self.textual_queries)? })
    }

    /// Final query states after all blocks.
    pub fn encode<T: Element>(
        &self,
        cfg: &ModelConfig,
        tape: &mut Tape<T>,
        visual_tokens: Var,
        textual_tokens: Var,
        valid_tokens: Option<&[usize]>,
    ) -> Result<Streams> {
        let batch = check_inputs(cfg, tape, visual_tokens, textual_tokens, valid_tokens)?;
        let text_valid = if cfg.mask_text_padding {
            Some(valid_tokens.ok_or_else(|| {
                Error::Usage("mask_text_padding is set but no valid token counts were given".into())
            })?)
        } else {
            None
        };
        let mut q = self.initial_streams(tape, batch)?;
        for block in &self.blocks {
            q = block.forward(tape, q, visual_tokens, textual_tokens, text_valid)?;
        }
        Ok(q)
    }

    /// Pool each stream over its queries, concatenate, and map to a
    /// distribution over score bins: `[B, k_bins]`.
    pub fn head<T: Element>(&self, tape: &mut Tape<T>, q: Streams) -> Result<Var> {
        let mut pooled = Vec::with_capacity(2);
        for s in [q.visual, q.textual].into_iter().flatten() {
            pooled.push(tape.mean_axis(s, 1)?);
        }
        let joint = if pooled.len() == 1 { pooled[0] } else { tape.concat(&pooled, 1)? };
        let h = self.head_fc1.forward(tape, joint)?;
        let h = tape.gelu(h)?;
        let logits = self.head_fc2.forward(tape, h)?;
        tape.softmax_lastdim(logits)
    }

    /// `visual_tokens: [B, n_p, h_v]`, `textual_tokens: [B, n_w, h_t]` →
    /// predicted distributions `[B, k_bins]`.
    pub fn forward<T: Element>(
        &self,
        cfg: &ModelConfig,
        tape: &mut Tape<T>,
        visual_tokens: Var,
        textual_tokens: Var,
        valid_tokens: Option<&[usize]>,
    ) -> Result<Var> {
        let q = self.encode(cfg, tape, visual_tokens, textual_tokens, valid_tokens)?;
        self.head(tape, q)
    }
}

fn check_inputs<T: Element>(
    cfg: &ModelConfig,
    tape: &Tape<T>,
    visual: Var,
    textual: Var,
    valid_tokens: Option<&[usize]>,
) -> Result<usize> {
    let vs = tape.shape(visual);
    let ts = tape.shape(textual);
    if vs.len() != 3 || vs[1..] != [cfg.n_p, cfg.h_v] {
        return Err(Error::Dimension(format!(
            "visual tokens {vs:?}, model expects [B, {}, {}]",
            cfg.n_p, cfg.h_v
        )));
    }
    if ts.len() != 3 || ts[1..] != [cfg.n_w, cfg.h_t] {
        return Err(Error::Dimension(format!(
            "textual tokens {ts:?}, model expects [B, {}, {}]",
            cfg.n_w, cfg.h_t
        )));
    }
    if vs[0] != ts[0] {
        return Err(Error::Dimension(format!("batch mismatch: {} visual, {} textual", vs[0], ts[0])));
    }
    if let Some(v) = valid_tokens {
        if v.len() != vs[0] {
            return Err(Error::Dimension(format!("{} valid counts for batch {}", v.len(), vs[0])));
        }
    }
    Ok(vs[0])
}

/// A configured model with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mmlq<T> {
    config: ModelConfig,
    params: MmlqParams<Tensor<T>>,
}

impl<T: Element> Mmlq<T> {
    /// Seeded initialization; parameters are drawn in canonical order.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let h = config.h_q;
        let queries = |n: usize, rng: &mut Rng| QueryStream {
            embeddings: Tensor::new(
                &[n, h],
                (0..n * h).map(|_| T::from_f64(rng.truncated_normal(QUERY_INIT_STD))).collect(),
            )
            .expect("query shape"),
            pre_norm: LayerNorm::new(h),
        };
        let visual_queries = config.modality.has_visual().then(|| queries(config.n_v, &mut rng));
        let textual_queries = config.modality.has_textual().then(|| queries(config.n_t, &mut rng));
        let blocks = (0..config.n_blocks).map(|_| Block::new(&config, &mut rng)).collect();
        let streams = usize::from(config.modality.has_visual()) + usize::from(config.modality.has_textual());
        let head_fc1 = Linear::xavier(streams * h, h, &mut rng);
        let head_fc2 = Linear::xavier(h, config.k_bins, &mut rng);
        let params = MmlqParams { visual_queries, textual_queries, blocks, head_fc1, head_fc2 };
        Ok(Mmlq { config, params })
    }

    /// Build a model from `config` and parameter tensors in canonical order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut model = Self::new(config)?;
        let expected = model.named_parameters().len();
        if tensors.len() != expected {
            return Err(Error::Format(format!("{} parameter tensors, config needs {expected}", tensors.len())));
        }
        let mut err = None;
        let mut it = tensors.into_iter();
        model.params.visit_params_mut(&mut |p| {
            let t = it.next().expect("count checked");
            if t.shape() != p.shape() {
                err.get_or_insert_with(|| {
                    Error::Format(format!("parameter shape {:?}, config needs {:?}", t.shape(), p.shape()))
                });
            } else {
                *p = t;
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &MmlqParams<Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MmlqParams<Tensor<T>> {
        &mut self.params
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor<T>)> {
        named_params(&self.params)
    }

    /// Visit every parameter mutably, in canonical order.
    pub fn visit_parameters_mut(&mut self, mut f: impl FnMut(&mut Tensor<T>)) {
        self.params.visit_params_mut(&mut f);
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters as trainable leaves on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<MmlqParams<Var>> {
        bind(&self.params, tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Result<MmlqParams<Var>> {
        bind_frozen(&self.params, tape)
    }

    /// Inference on a fresh tape; no gradients are recorded.
    pub fn predict(
        &self,
        visual_tokens: &Tensor<T>,
        textual_tokens: &Tensor<T>,
        valid_tokens: Option<&[usize]>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind_frozen(&mut tape)?;
        let v = tape.constant(visual_tokens.clone())?;
        let t = tape.constant(textual_tokens.clone())?;
        let out = p.forward(&self.config, &mut tape, v, t, valid_tokens)?;
        Ok(tape.value(out).clone())
    }

    pub fn cast<U: Element>(&self) -> Mmlq<U> {
        Mmlq {
            config: self.config.clone(),
            params: self.params.map_params("", &mut |_, p: &Tensor<T>| p.cast()),
        }
    }
}
