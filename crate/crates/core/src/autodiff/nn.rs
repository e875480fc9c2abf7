//! Layer builders: MLPs, stacked attention blocks, pooling.
//!
//! Each builder comes in two halves sharing one naming scheme: a `register_*`
//! function that adds parameters to a [`ParamSet`] (in deterministic order)
//! and a forward function that resolves them from a [`BoundParams`] and
//! extends the graph.
//!
//! Attention blocks are pre-norm residual blocks: layer norm feeds the
//! multi-head attention, a second layer norm feeds a one-hidden-layer
//! feed-forward sublayer, and both sublayers are added back to the stream.

use super::graph::{Graph, Var};
use super::params::{init_linear, init_uniform_fanin, BoundParams, ParamSet};
use super::real::Real;
use super::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Fully-connected network shape: `layers` linear maps with relu between
/// them (none after the last).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub layers: usize,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: usize, output: usize, layers: usize) -> Self {
        assert!(layers >= 1, "an MLP needs at least one layer");
        MlpSpec {
            input,
            hidden,
            output,
            layers,
        }
    }
}

/// Registers `spec.layers` weight/bias pairs under `prefix`.
pub fn register_mlp<F: Real>(
    ps: &mut ParamSet<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    spec: MlpSpec,
) {
    for l in 0..spec.layers {
        let fan_in = if l == 0 { spec.input } else { spec.hidden };
        let fan_out = if l + 1 == spec.layers {
            spec.output
        } else {
            spec.hidden
        };
        ps.register(&format!("{prefix}.w{l}"), init_linear(rng, fan_in, fan_out));
        ps.register(&format!("{prefix}.b{l}"), Tensor::zeros(vec![fan_out]).with_grad());
    }
}

/// Runs the MLP on rows of `x` (trailing dim must equal `spec.input`).
pub fn mlp_forward<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    prefix: &str,
    spec: MlpSpec,
    x: Var,
) -> Var {
    let mut h = x;
    for l in 0..spec.layers {
        let w = bp.var(&format!("{prefix}.w{l}"));
        let b = bp.var(&format!("{prefix}.b{l}"));
        h = g.matmul(h, w);
        h = g.add_bias(h, b);
        if l + 1 < spec.layers {
            h = g.relu(h);
        }
    }
    h
}

/// Stacked attention shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnStackSpec {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
}

impl AttnStackSpec {
    pub fn new(width: usize, heads: usize, blocks: usize) -> Self {
        assert!(heads >= 1 && width.is_multiple_of(heads), "heads must divide width");
        assert!(blocks >= 1, "a stack needs at least one block");
        AttnStackSpec {
            width,
            heads,
            blocks,
        }
    }
}

fn register_block<F: Real>(
    ps: &mut ParamSet<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    width: usize,
    cross: bool,
) {
    let d = width;
    ps.register(&format!("{prefix}.ln_q.g"), ones(d));
    ps.register(&format!("{prefix}.ln_q.b"), Tensor::zeros(vec![d]).with_grad());
    if cross {
        ps.register(&format!("{prefix}.ln_k.g"), ones(d));
        ps.register(&format!("{prefix}.ln_k.b"), Tensor::zeros(vec![d]).with_grad());
    }
    for name in ["wq", "wk", "wv", "wo"] {
        ps.register(&format!("{prefix}.{name}"), init_linear(rng, d, d));
    }
    ps.register(&format!("{prefix}.ln_ff.g"), ones(d));
    ps.register(&format!("{prefix}.ln_ff.b"), Tensor::zeros(vec![d]).with_grad());
    ps.register(&format!("{prefix}.ff.w1"), init_linear(rng, d, d));
    ps.register(&format!("{prefix}.ff.b1"), Tensor::zeros(vec![d]).with_grad());
    ps.register(&format!("{prefix}.ff.w2"), init_linear(rng, d, d));
    ps.register(&format!("{prefix}.ff.b2"), Tensor::zeros(vec![d]).with_grad());
}

fn ones<F: Real>(d: usize) -> Tensor<F> {
    Tensor {
        shape: vec![d],
        values: vec![F::one(); d],
        requires_grad: true,
    }
}

/// Registers a self-attention stack under `prefix`.
pub fn register_attention_stack<F: Real>(
    ps: &mut ParamSet<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    spec: AttnStackSpec,
) {
    for b in 0..spec.blocks {
        register_block(ps, rng, &format!("{prefix}.blk{b}"), spec.width, false);
    }
}

/// Registers a cross-attention stack (adds a key layer norm per block).
pub fn register_cross_attention_stack<F: Real>(
    ps: &mut ParamSet<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    spec: AttnStackSpec,
) {
    for b in 0..spec.blocks {
        register_block(ps, rng, &format!("{prefix}.blk{b}"), spec.width, true);
    }
}

/// Scaled dot-product multi-head attention with projection weights supplied
/// as graph vars. `key_mask` is flat `[B, Nk]`; masked keys get zero weight.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<F: Real>(
    g: &mut Graph<F>,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Var {
    let width = *g.shape(q).last().unwrap();
    assert!(width.is_multiple_of(heads), "heads must divide width");
    let dh = width / heads;
    let qp = g.matmul(q, wq);
    let kp = g.matmul(k, wk);
    let vp = g.matmul(v, wv);
    let qh = g.split_heads(qp, heads);
    let kh = g.split_heads(kp, heads);
    let vh = g.split_heads(vp, heads);
    let scores = g.bmm(qh, kh, true);
    let scaled = g.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
    let tiled_mask = key_mask.map(|m| {
        let nk = g.shape(k)[1];
        let bsz = g.shape(k)[0];
        assert_eq!(m.len(), bsz * nk, "key mask must be [batch, keys]");
        let mut out = Vec::with_capacity(bsz * heads * nk);
        for b in 0..bsz {
            for _ in 0..heads {
                out.extend_from_slice(&m[b * nk..(b + 1) * nk]);
            }
        }
        out
    });
    let weights = g.softmax_masked(scaled, tiled_mask.as_deref());
    let ctx = g.bmm(weights, vh, false);
    let merged = g.merge_heads(ctx, heads);
    g.matmul(merged, wo)
}

fn feed_forward<F: Real>(g: &mut Graph<F>, bp: &BoundParams<F>, prefix: &str, x: Var) -> Var {
    let ln_g = bp.var(&format!("{prefix}.ln_ff.g"));
    let ln_b = bp.var(&format!("{prefix}.ln_ff.b"));
    let xn = g.layer_norm(x, ln_g, ln_b);
    let w1 = bp.var(&format!("{prefix}.ff.w1"));
    let b1 = bp.var(&format!("{prefix}.ff.b1"));
    let w2 = bp.var(&format!("{prefix}.ff.w2"));
    let b2 = bp.var(&format!("{prefix}.ff.b2"));
    let h = g.matmul(xn, w1);
    let h = g.add_bias(h, b1);
    let h = g.relu(h);
    let h = g.matmul(h, w2);
    let h = g.add_bias(h, b2);
    g.add(x, h)
}

/// Self-attention stack over sets: `x` is `[B,N,D]`, `key_mask` flat `[B,N]`.
/// Masked elements neither attend usefully nor get attended to; their output
/// rows are discarded by downstream pooling with the same mask.
pub fn attention_stack<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    prefix: &str,
    spec: AttnStackSpec,
    x: Var,
    key_mask: Option<&[bool]>,
) -> Var {
    let mut h = x;
    for b in 0..spec.blocks {
        let p = format!("{prefix}.blk{b}");
        let ln_g = bp.var(&format!("{p}.ln_q.g"));
        let ln_b = bp.var(&format!("{p}.ln_q.b"));
        let hn = g.layer_norm(h, ln_g, ln_b);
        let att = multi_head_attention(
            g,
            bp.var(&format!("{p}.wq")),
            bp.var(&format!("{p}.wk")),
            bp.var(&format!("{p}.wv")),
            bp.var(&format!("{p}.wo")),
            spec.heads,
            hn,
            hn,
            hn,
            key_mask,
        );
        let h1 = g.add(h, att);
        h = feed_forward(g, bp, &p, h1);
    }
    h
}

/// Cross-attention stack: the query stream `q` (`[B,Nq,D]`) is refined
/// against fixed keys `k` and values `v` (`[B,Nk,D]`).
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_stack<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    prefix: &str,
    spec: AttnStackSpec,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Var {
    let mut h = q;
    for b in 0..spec.blocks {
        let p = format!("{prefix}.blk{b}");
        let ln_qg = bp.var(&format!("{p}.ln_q.g"));
        let ln_qb = bp.var(&format!("{p}.ln_q.b"));
        let hn = g.layer_norm(h, ln_qg, ln_qb);
        let ln_kg = bp.var(&format!("{p}.ln_k.g"));
        let ln_kb = bp.var(&format!("{p}.ln_k.b"));
        let kn = g.layer_norm(k, ln_kg, ln_kb);
        let att = multi_head_attention(
            g,
            bp.var(&format!("{p}.wq")),
            bp.var(&format!("{p}.wk")),
            bp.var(&format!("{p}.wv")),
            bp.var(&format!("{p}.wo")),
            spec.heads,
            hn,
            kn,
            v,
            key_mask,
        );
        let h1 = g.add(h, att);
        h = feed_forward(g, bp, &p, h1);
    }
    h
}

/// Set pooling flavor used after (optional) self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// Masked mean over the set dimension.
    Mean,
    /// Pooling by multi-head attention: one cross block whose query is a
    /// learned seed vector.
    Pma,
}

/// Registers pooling parameters (none for mean).
pub fn register_pool<F: Real>(
    ps: &mut ParamSet<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    mode: PoolMode,
    width: usize,
    heads: usize,
) {
    if mode == PoolMode::Pma {
        ps.register(
            &format!("{prefix}.seed"),
            init_uniform_fanin(rng, vec![1, 1, width], width),
        );
        register_cross_attention_stack(
            ps,
            rng,
            &format!("{prefix}.attn"),
            AttnStackSpec::new(width, heads, 1),
        );
    }
}

/// Learned PMA pooling of `x` (`[B,N,D]`) down to `[B,1,D]`.
pub fn pma_pool<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    prefix: &str,
    width: usize,
    heads: usize,
    x: Var,
    key_mask: Option<&[bool]>,
) -> Var {
    let bsz = g.shape(x)[0];
    let seed = bp.var(&format!("{prefix}.seed"));
    let q = g.tile_dim0(seed, bsz);
    cross_attention_stack(
        g,
        bp,
        &format!("{prefix}.attn"),
        AttnStackSpec::new(width, heads, 1),
        q,
        x,
        x,
        key_mask,
    )
}

/// Pools a set `[B,N,D]` to `[B,1,D]` with the requested mode.
#[allow(clippy::too_many_arguments)]
pub fn pool<F: Real>(
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    prefix: &str,
    mode: PoolMode,
    width: usize,
    heads: usize,
    x: Var,
    key_mask: Option<&[bool]>,
) -> Var {
    match mode {
        PoolMode::Mean => g.mean_dim1(x, key_mask),
        PoolMode::Pma => pma_pool(g, bp, prefix, width, heads, x, key_mask),
    }
}
