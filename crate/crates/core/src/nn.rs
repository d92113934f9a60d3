//! Shared layers built on [`Graph`]: affine maps and pre-norm transformer blocks.

use rand::Rng;

use crate::numerics::{Float, Graph, NumericsError, ParamStore, ParamVars, Tensor, Var};

type Result<T> = std::result::Result<T, NumericsError>;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

pub fn init_linear<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut R,
) {
    store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[dim], T::one()));
    store.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
}

pub fn linear<T: Float>(g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let h = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    g.add_row(h, p.get(&format!("{name}.b"))?)
}

pub fn layer_norm<T: Float>(g: &mut Graph<T>, p: &ParamVars, name: &str, x: Var) -> Result<Var> {
    g.layer_norm(x, p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?, LN_EPS)
}

/// Shape of a stack of pre-norm transformer blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl BlockShape {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Parameters of one block: `ln1, attn.{q,k,v,o}, ln2, mlp.{fc,proj}`.
pub fn init_block<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    shape: BlockShape,
    depth: usize,
    rng: &mut R,
) {
    let d = shape.dim;
    // residual projections shrink with depth
    let out_std = INIT_STD / (2.0 * depth.max(1) as f64).sqrt();
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    for n in ["q", "k", "v"] {
        init_linear(store, &format!("{prefix}.attn.{n}"), d, d, INIT_STD, rng);
    }
    init_linear(store, &format!("{prefix}.attn.o"), d, d, out_std, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.mlp.fc"), d, d * shape.mlp_ratio, INIT_STD, rng);
    init_linear(store, &format!("{prefix}.mlp.proj"), d * shape.mlp_ratio, d, out_std, rng);
}

/// Attention masking for a batch of `[batch, len]` sequences.
#[derive(Clone, Copy, Debug)]
pub struct AttnMask<'a> {
    pub causal: bool,
    /// `[batch * len]`, true where the key is padding.
    pub key_pad: Option<&'a [bool]>,
}

/// One pre-norm block over `x: [batch * len, dim]`.
pub fn block_forward<T: Float>(
    g: &mut Graph<T>,
    p: &ParamVars,
    prefix: &str,
    shape: BlockShape,
    x: Var,
    batch: usize,
    len: usize,
    mask: AttnMask<'_>,
) -> Result<Var> {
    let (h, dh) = (shape.heads, shape.head_dim());
    let n = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let mut heads = Vec::with_capacity(3);
    for name in ["q", "k", "v"] {
        let t = linear(g, p, &format!("{prefix}.attn.{name}"), n)?;
        let t = g.reshape(t, &[batch, len, h, dh])?;
        let t = g.swap_axes12(t)?;
        heads.push(g.reshape(t, &[batch * h, len, dh])?);
    }
    let scores = g.bmm(heads[0], heads[1], false, true)?;
    let scores = g.scale(scores, T::of(1.0 / (dh as f64).sqrt()));
    let probs = g.attention_softmax(scores, mask.causal, mask.key_pad.map(|m| (m, h)))?;
    let ctx = g.bmm(probs, heads[2], false, false)?;
    let ctx = g.reshape(ctx, &[batch, h, len, dh])?;
    let ctx = g.swap_axes12(ctx)?;
    let ctx = g.reshape(ctx, &[batch * len, shape.dim])?;
    let attn = linear(g, p, &format!("{prefix}.attn.o"), ctx)?;
    let x = g.add(x, attn)?;
    let n = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let m = linear(g, p, &format!("{prefix}.mlp.fc"), n)?;
    let m = g.gelu(m);
    let m = linear(g, p, &format!("{prefix}.mlp.proj"), m)?;
    g.add(x, m)
}
