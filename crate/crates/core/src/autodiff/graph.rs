//! Reverse-mode differentiation graph.
//!
//! A [`Graph`] is an append-only arena of nodes. Forward methods push a node
//! holding the computed value plus the op record needed for the backward
//! sweep; [`Graph::backward`] walks the arena in reverse and accumulates
//! gradients into per-node buffers. One graph is built per family per
//! iteration and dropped afterwards.
//!
//! Shape violations are programmer errors and panic; recoverable conditions
//! (non-finite losses, bad user input) are surfaced as `Result`s by the
//! higher-level modules that drive the graph.

use super::kernels::{axpy, dot, mm_nn, mm_nt, mm_tn};
use super::real::Real;
use super::tensor::Tensor;
use std::fmt;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Errors surfaced while driving a graph from user-facing entry points.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphError {
    /// A value that must be finite (loss, gradient) was NaN or infinite.
    NonFinite { context: String },
}

impl fmt::Display for GraphError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphError::NonFinite { context } => {
                write!(f, "non-finite value encountered in {context}")
            }
        }
    }
}

impl std::error::Error for GraphError {}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    MatmulRows(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    AddBatchVec {
        x: usize,
        e: usize,
    },
    Relu(usize),
    Softplus(usize),
    Square(usize),
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
    },
    MeanDim1 {
        x: usize,
        mask: Option<Vec<bool>>,
    },
    ConcatLast(Vec<usize>),
    SliceLast {
        x: usize,
        start: usize,
    },
    TileDim0 {
        x: usize,
    },
    TileDim1 {
        x: usize,
    },
    SplitHeads {
        x: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        heads: usize,
    },
    SwapDims01(usize),
    Permute0213(usize),
    RepeatInterleave0 {
        x: usize,
        times: usize,
    },
    Reshape(usize),
    SumAll(usize),
    MaskedSumAll {
        x: usize,
        row_mask: Option<Vec<bool>>,
    },
    GaussianNll {
        mean: usize,
        var: usize,
        y: Vec<F>,
    },
    GaussianKl {
        mq: usize,
        vq: usize,
        mp: usize,
        vp: usize,
    },
    Reparam {
        mean: usize,
        var: usize,
        noise: Vec<F>,
    },
    CategoricalNll {
        probs: usize,
        classes: Vec<usize>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor; it participates in the backward sweep when
    /// `requires_grad` is set on it.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        let needs_grad = value.requires_grad;
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Shape of a node's value.
    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced at node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            values: self.nodes[a.0]
                .value
                .values
                .iter()
                .zip(&self.nodes[b.0].value.values)
                .map(|(&x, &y)| x + y)
                .collect(),
            requires_grad: false,
        };
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = Tensor {
            shape: self.shape(a).to_vec(),
            values: self.nodes[a.0]
                .value
                .values
                .iter()
                .zip(&self.nodes[b.0].value.values)
                .map(|(&x, &y)| x * y)
                .collect(),
            requires_grad: false,
        };
        let ng = self.needs(&[a.0, b.0]);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let v = Tensor {
            shape: self.shape(x).to_vec(),
            values: self.nodes[x.0].value.values.iter().map(|&a| a * c).collect(),
            requires_grad: false,
        };
        let ng = self.needs(&[x.0]);
        self.push(v, Op::Scale(x.0, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let v = Tensor {
            shape: self.shape(x).to_vec(),
            values: self.nodes[x.0].value.values.iter().map(|&a| a + c).collect(),
            requires_grad: false,
        };
        let ng = self.needs(&[x.0]);
        self.push(v, Op::AddScalar(x.0), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = Tensor {
            shape: self.shape(x).to_vec(),
            values: self.nodes[x.0]
                .value
                .values
                .iter()
                .map(|&a| if a > F::zero() { a } else { F::zero() })
                .collect(),
            requires_grad: false,
        };
        let ng = self.needs(&[x.0]);
        self.push(v, Op::Relu(x.0), ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = Tensor {
            shape: self.shape(x).to_vec(),
            values: self.nodes[x.0]
                .value
                .values
                .iter()
                .map(|&a| softplus_stable(a))
                .collect(),
            requires_grad: false,
        };
        let ng = self.needs(&[x.0]);
        self.push(v, Op::Softplus(x.0), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = Tensor {
            shape: self.shape(x).to_vec(),
            values: self.nodes[x.0].value.values.iter().map(|&a| a * a).collect(),
            requires_grad: false,
        };
        let ng = self.needs(&[x.0]);
        self.push(v, Op::Square(x.0), ng)
    }

    // ---- linear algebra ----

    /// `x` viewed as rows `[R, K]` times weights `[K, M]`; the leading
    /// dimensions of `x` are preserved and the trailing one becomes `M`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert_eq!(ws.len(), 2, "matmul weights must be rank 2");
        let (k, m) = (ws[0], ws[1]);
        assert_eq!(
            *xs.last().unwrap(),
            k,
            "matmul inner dims {xs:?} x {ws:?}"
        );
        let rows = self.nodes[x.0].value.rows();
        let mut out = vec![F::zero(); rows * m];
        mm_nn(
            &self.nodes[x.0].value.values,
            &self.nodes[w.0].value.values,
            &mut out,
            rows,
            k,
            m,
        );
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = m;
        let ng = self.needs(&[x.0, w.0]);
        self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
            },
            Op::MatmulRows(x.0, w.0),
            ng,
        )
    }

    /// Batched product `[B,N,K] x [B,K,M] -> [B,N,M]`, or with
    /// `transpose_b`, `[B,N,K] x [B,M,K]^T -> [B,N,M]`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 3, "bmm lhs must be rank 3");
        assert_eq!(sb.len(), 3, "bmm rhs must be rank 3");
        assert_eq!(sa[0], sb[0], "bmm batch dims {sa:?} x {sb:?}");
        let (bsz, n, k) = (sa[0], sa[1], sa[2]);
        let m = if transpose_b {
            assert_eq!(sb[2], k, "bmm inner dims {sa:?} x {sb:?}^T");
            sb[1]
        } else {
            assert_eq!(sb[1], k, "bmm inner dims {sa:?} x {sb:?}");
            sb[2]
        };
        let av = &self.nodes[a.0].value.values;
        let bv = &self.nodes[b.0].value.values;
        let mut out = vec![F::zero(); bsz * n * m];
        for i in 0..bsz {
            let ab = &av[i * n * k..(i + 1) * n * k];
            let ob = &mut out[i * n * m..(i + 1) * n * m];
            if transpose_b {
                let bb = &bv[i * m * k..(i + 1) * m * k];
                mm_nt(ab, bb, ob, n, k, m);
            } else {
                let bb = &bv[i * k * m..(i + 1) * k * m];
                mm_nn(ab, bb, ob, n, k, m);
            }
        }
        let ng = self.needs(&[a.0, b.0]);
        self.push(
            Tensor {
                shape: vec![bsz, n, m],
                values: out,
                requires_grad: false,
            },
            Op::Bmm {
                a: a.0,
                b: b.0,
                transpose_b,
            },
            ng,
        )
    }

    /// Adds a `[D]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(b), &[d], "bias must be [last_dim]");
        let rows = self.nodes[x.0].value.rows();
        let bv = &self.nodes[b.0].value.values;
        let mut out = self.nodes[x.0].value.values.clone();
        for r in 0..rows {
            for (o, &bb) in out[r * d..(r + 1) * d].iter_mut().zip(bv) {
                *o = *o + bb;
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x.0, b.0]);
        self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
            },
            Op::AddBias { x: x.0, b: b.0 },
            ng,
        )
    }

    /// Adds `e[b]` (shape `[B,D]`) to every row of slab `b` of `x` (`[B,N,D]`).
    pub fn add_batch_vec(&mut self, x: Var, e: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "add_batch_vec input must be rank 3");
        let (bsz, n, d) = (xs[0], xs[1], xs[2]);
        assert_eq!(self.shape(e), &[bsz, d], "add_batch_vec vector shape");
        let ev = &self.nodes[e.0].value.values;
        let mut out = self.nodes[x.0].value.values.clone();
        for b in 0..bsz {
            let erow = &ev[b * d..(b + 1) * d];
            for i in 0..n {
                let base = (b * n + i) * d;
                for (o, &bb) in out[base..base + d].iter_mut().zip(erow) {
                    *o = *o + bb;
                }
            }
        }
        let ng = self.needs(&[x.0, e.0]);
        self.push(
            Tensor {
                shape: xs,
                values: out,
                requires_grad: false,
            },
            Op::AddBatchVec { x: x.0, e: e.0 },
            ng,
        )
    }

    // ---- normalization and attention pieces ----

    /// Softmax over the trailing dimension. With a mask, `x` must be
    /// `[B, Nq, Nk]` and `key_mask` flat `[B, Nk]`; masked keys get zero
    /// weight. Panics if a row has every key masked.
    pub fn softmax_masked(&mut self, x: Var, key_mask: Option<&[bool]>) -> Var {
        let xs = self.shape(x).to_vec();
        let k = *xs.last().unwrap();
        let rows = self.nodes[x.0].value.rows();
        let nq = if let Some(mask) = key_mask {
            assert_eq!(xs.len(), 3, "masked softmax input must be rank 3");
            assert_eq!(mask.len(), xs[0] * k, "key mask must be [batch, keys]");
            xs[1]
        } else {
            1
        };
        let xv = &self.nodes[x.0].value.values;
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * k..(r + 1) * k];
            let orow = &mut out[r * k..(r + 1) * k];
            let mrow = key_mask.map(|m| &m[(r / nq) * k..(r / nq + 1) * k]);
            let mut hi = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if mrow.is_none_or(|m| m[j]) && v > hi {
                    hi = v;
                }
            }
            assert!(
                hi > F::neg_infinity(),
                "softmax row {r} has every key masked"
            );
            let mut z = F::zero();
            for (j, &v) in row.iter().enumerate() {
                if mrow.is_none_or(|m| m[j]) {
                    let e = (v - hi).exp();
                    orow[j] = e;
                    z = z + e;
                }
            }
            let inv = F::one() / z;
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor {
                shape: xs,
                values: out,
                requires_grad: false,
            },
            Op::Softmax { x: x.0 },
            ng,
        )
    }

    /// Layer normalization over the trailing dimension with learnable gain
    /// and bias (both `[D]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let d = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gain), &[d], "layer_norm gain shape");
        assert_eq!(self.shape(bias), &[d], "layer_norm bias shape");
        let rows = self.nodes[x.0].value.rows();
        let xv = &self.nodes[x.0].value.values;
        let gv = &self.nodes[gain.0].value.values;
        let bv = &self.nodes[bias.0].value.values;
        let eps = F::from_f64(LAYER_NORM_EPS);
        let inv_d = F::one() / F::from_f64(d as f64);
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut mu = F::zero();
            for &v in row {
                mu = mu + v;
            }
            mu = mu * inv_d;
            let mut var = F::zero();
            for &v in row {
                let c = v - mu;
                var = var + c * c;
            }
            var = var * inv_d;
            let rstd = F::one() / (var + eps).sqrt();
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mu) * rstd * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs(&[x.0, gain.0, bias.0]);
        self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
            },
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            ng,
        )
    }

    /// Mean over dimension 1 of a `[B,N,D]` tensor, optionally restricted to
    /// rows where `mask` (flat `[B,N]`) is set. Panics if a batch has no
    /// unmasked row.
    pub fn mean_dim1(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "mean_dim1 input must be rank 3");
        let (bsz, n, d) = (xs[0], xs[1], xs[2]);
        if let Some(m) = mask {
            assert_eq!(m.len(), bsz * n, "mean_dim1 mask must be [batch, rows]");
        }
        let xv = &self.nodes[x.0].value.values;
        let mut out = vec![F::zero(); bsz * d];
        for b in 0..bsz {
            let mut cnt = 0usize;
            for i in 0..n {
                if mask.is_none_or(|m| m[b * n + i]) {
                    cnt += 1;
                    let base = (b * n + i) * d;
                    for j in 0..d {
                        out[b * d + j] = out[b * d + j] + xv[base + j];
                    }
                }
            }
            assert!(cnt > 0, "mean_dim1 batch {b} has every row masked");
            let inv = F::one() / F::from_f64(cnt as f64);
            for j in 0..d {
                out[b * d + j] = out[b * d + j] * inv;
            }
        }
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor {
                shape: vec![bsz, 1, d],
                values: out,
                requires_grad: false,
            },
            Op::MeanDim1 {
                x: x.0,
                mask: mask.map(|m| m.to_vec()),
            },
            ng,
        )
    }

    // ---- data movement ----

    /// Concatenates tensors along the trailing dimension; leading dims must
    /// agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_last needs at least one input");
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(
                &s[..s.len() - 1],
                &lead[..],
                "concat_last leading dims differ"
            );
            total += *s.last().unwrap();
        }
        let mut out = vec![F::zero(); rows * total];
        let mut offset = 0usize;
        for &p in parts {
            let d = *self.shape(p).last().unwrap();
            let pv = &self.nodes[p.0].value.values;
            for r in 0..rows {
                out[r * total + offset..r * total + offset + d]
                    .copy_from_slice(&pv[r * d..(r + 1) * d]);
            }
            offset += d;
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
            },
            Op::ConcatLast(ids),
            ng,
        )
    }

    /// Takes `[start, start+len)` of the trailing dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        assert!(start + len <= d, "slice_last out of range");
        let rows = self.nodes[x.0].value.rows();
        let xv = &self.nodes[x.0].value.values;
        let mut out = vec![F::zero(); rows * len];
        for r in 0..rows {
            out[r * len..(r + 1) * len].copy_from_slice(&xv[r * d + start..r * d + start + len]);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
            },
            Op::SliceLast { x: x.0, start },
            ng,
        )
    }

    /// Repeats a `[1,N,D]` tensor `times` along dim 0.
    pub fn tile_dim0(&mut self, x: Var, times: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "tile_dim0 input must be rank 3");
        assert_eq!(xs[0], 1, "tile_dim0 input batch must be 1");
        let base = &self.nodes[x.0].value.values;
        let mut out = Vec::with_capacity(base.len() * times);
        for _ in 0..times {
            out.extend_from_slice(base);
        }
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor {
                shape: vec![times, xs[1], xs[2]],
                values: out,
                requires_grad: false,
            },
            Op::TileDim0 { x: x.0 },
            ng,
        )
    }

    /// Repeats a `[B,1,D]` tensor `times` along dim 1.
    pub fn tile_dim1(&mut self, x: Var, times: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "tile_dim1 input must be rank 3");
        assert_eq!(xs[1], 1, "tile_dim1 input rows must be 1");
        let (bsz, d) = (xs[0], xs[2]);
        let xv = &self.nodes[x.0].value.values;
        let mut out = Vec::with_capacity(bsz * times * d);
        for b in 0..bsz {
            for _ in 0..times {
                out.extend_from_slice(&xv[b * d..(b + 1) * d]);
            }
        }
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor {
                shape: vec![bsz, times, d],
                values: out,
                requires_grad: false,
            },
            Op::TileDim1 { x: x.0 },
            ng,
        )
    }

    /// `[B,N,H*dh] -> [B*H,N,dh]` for per-head attention.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "split_heads input must be rank 3");
        let (bsz, n, d) = (xs[0], xs[1], xs[2]);
        assert_eq!(d % heads, 0, "head count must divide width");
        let dh = d / heads;
        let xv = &self.nodes[x.0].value.values;
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..bsz {
            for h in 0..heads {
                for i in 0..n {
                    let src = (b * n + i) * d + h * dh;
                    let dst = ((b * heads + h) * n + i) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor {
                shape: vec![bsz * heads, n, dh],
                values: out,
                requires_grad: false,
            },
            Op::SplitHeads { x: x.0, heads },
            ng,
        )
    }

    /// Inverse of [`Graph::split_heads`]: `[B*H,N,dh] -> [B,N,H*dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "merge_heads input must be rank 3");
        let (bh, n, dh) = (xs[0], xs[1], xs[2]);
        assert_eq!(bh % heads, 0, "batch dim must be divisible by heads");
        let bsz = bh / heads;
        let d = dh * heads;
        let xv = &self.nodes[x.0].value.values;
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..bsz {
            for h in 0..heads {
                for i in 0..n {
                    let src = ((b * heads + h) * n + i) * dh;
                    let dst = (b * n + i) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor {
                shape: vec![bsz, n, d],
                values: out,
                requires_grad: false,
            },
            Op::MergeHeads { x: x.0, heads },
            ng,
        )
    }

    /// Swaps the first two dims of a rank-3 tensor.
    pub fn swap_dims01(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "swap_dims01 input must be rank 3");
        let (a, b, d) = (xs[0], xs[1], xs[2]);
        let xv = &self.nodes[x.0].value.values;
        let mut out = vec![F::zero(); xv.len()];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * d;
                let dst = (j * a + i) * d;
                out[dst..dst + d].copy_from_slice(&xv[src..src + d]);
            }
        }
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor {
                shape: vec![b, a, d],
                values: out,
                requires_grad: false,
            },
            Op::SwapDims01(x.0),
            ng,
        )
    }

    /// Swaps the middle dims of a rank-4 tensor: `[A,B,C,D] -> [A,C,B,D]`.
    pub fn permute_0213(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4, "permute_0213 input must be rank 4");
        let (a, b, c, d) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = &self.nodes[x.0].value.values;
        let mut out = vec![F::zero(); xv.len()];
        for i in 0..a {
            for j in 0..b {
                for l in 0..c {
                    let src = ((i * b + j) * c + l) * d;
                    let dst = ((i * c + l) * b + j) * d;
                    out[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor {
                shape: vec![a, c, b, d],
                values: out,
                requires_grad: false,
            },
            Op::Permute0213(x.0),
            ng,
        )
    }

    /// Repeats each batch element of a rank-3 tensor `times` times
    /// contiguously: `[B,N,D] -> [B*times,N,D]`.
    pub fn repeat_interleave0(&mut self, x: Var, times: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(!xs.is_empty() && xs.len() <= 3, "repeat_interleave0 rank");
        let block: usize = xs[1..].iter().product();
        let bsz = xs[0];
        let xv = &self.nodes[x.0].value.values;
        let mut out = Vec::with_capacity(xv.len() * times);
        for b in 0..bsz {
            for _ in 0..times {
                out.extend_from_slice(&xv[b * block..(b + 1) * block]);
            }
        }
        let mut shape = xs.clone();
        shape[0] = bsz * times;
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
            },
            Op::RepeatInterleave0 { x: x.0, times },
            ng,
        )
    }

    /// Reinterprets the value with a new shape of the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.nodes[x.0].value.numel(),
            "reshape changes element count"
        );
        let v = Tensor {
            shape,
            values: self.nodes[x.0].value.values.clone(),
            requires_grad: false,
        };
        let ng = self.needs(&[x.0]);
        self.push(v, Op::Reshape(x.0), ng)
    }

    // ---- reductions ----

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = F::zero();
        for &v in &self.nodes[x.0].value.values {
            s = s + v;
        }
        let ng = self.needs(&[x.0]);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), ng)
    }

    /// Sums rows (of the trailing dimension) where `row_mask` is set, as a
    /// `[1]` tensor. Without a mask this equals [`Graph::sum_all`].
    pub fn masked_sum_all(&mut self, x: Var, row_mask: Option<&[bool]>) -> Var {
        let d = *self.shape(x).last().unwrap();
        let rows = self.nodes[x.0].value.rows();
        if let Some(m) = row_mask {
            assert_eq!(m.len(), rows, "row mask length");
        }
        let xv = &self.nodes[x.0].value.values;
        let mut s = F::zero();
        for r in 0..rows {
            if row_mask.is_none_or(|m| m[r]) {
                for &v in &xv[r * d..(r + 1) * d] {
                    s = s + v;
                }
            }
        }
        let ng = self.needs(&[x.0]);
        self.push(
            Tensor::scalar(s),
            Op::MaskedSumAll {
                x: x.0,
                row_mask: row_mask.map(|m| m.to_vec()),
            },
            ng,
        )
    }

    // ---- probabilistic ops ----

    /// Per-element negative log-density of `y` under independent Gaussians
    /// `N(mean, var)`; output has the shape of `mean`.
    pub fn gaussian_nll_diag(&mut self, mean: Var, var: Var, y: &Tensor<F>) -> Var {
        assert_eq!(self.shape(mean), self.shape(var), "mean/var shapes differ");
        assert_eq!(self.shape(mean), &y.shape[..], "observation shape differs");
        let half = F::from_f64(0.5);
        let half_ln_2pi = F::from_f64(0.5 * (2.0 * std::f64::consts::PI).ln());
        let mv = &self.nodes[mean.0].value.values;
        let vv = &self.nodes[var.0].value.values;
        let out: Vec<F> = mv
            .iter()
            .zip(vv)
            .zip(&y.values)
            .map(|((&m, &v), &yy)| {
                debug_assert!(v > F::zero(), "gaussian_nll_diag needs positive variance");
                let d = yy - m;
                half_ln_2pi + half * v.ln() + d * d / (v + v)
            })
            .collect();
        let shape = self.shape(mean).to_vec();
        let ng = self.needs(&[mean.0, var.0]);
        self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
            },
            Op::GaussianNll {
                mean: mean.0,
                var: var.0,
                y: y.values.clone(),
            },
            ng,
        )
    }

    /// Per-element KL divergence `KL(N(mq,vq) || N(mp,vp))` for diagonal
    /// Gaussians; output has the shape of `mq`.
    pub fn gaussian_kl_diag(&mut self, mq: Var, vq: Var, mp: Var, vp: Var) -> Var {
        let shape = self.shape(mq).to_vec();
        assert_eq!(self.shape(vq), &shape[..], "gaussian_kl_diag vq shape");
        assert_eq!(self.shape(mp), &shape[..], "gaussian_kl_diag mp shape");
        assert_eq!(self.shape(vp), &shape[..], "gaussian_kl_diag vp shape");
        let half = F::from_f64(0.5);
        let one = F::one();
        let mqv = &self.nodes[mq.0].value.values;
        let vqv = &self.nodes[vq.0].value.values;
        let mpv = &self.nodes[mp.0].value.values;
        let vpv = &self.nodes[vp.0].value.values;
        let mut out = vec![F::zero(); mqv.len()];
        for i in 0..out.len() {
            let dv = mqv[i] - mpv[i];
            debug_assert!(
                vqv[i] > F::zero() && vpv[i] > F::zero(),
                "gaussian_kl_diag needs positive variances"
            );
            out[i] = half * ((vpv[i] / vqv[i]).ln() + (vqv[i] + dv * dv) / vpv[i] - one);
        }
        let ng = self.needs(&[mq.0, vq.0, mp.0, vp.0]);
        self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
            },
            Op::GaussianKl {
                mq: mq.0,
                vq: vq.0,
                mp: mp.0,
                vp: vp.0,
            },
            ng,
        )
    }

    /// Reparameterized Gaussian sample `mean + sqrt(var) * noise` with fixed
    /// standard-normal noise supplied by the caller.
    pub fn reparam_sample(&mut self, mean: Var, var: Var, noise: &[F]) -> Var {
        assert_eq!(self.shape(mean), self.shape(var), "mean/var shapes differ");
        let mv = &self.nodes[mean.0].value.values;
        let vv = &self.nodes[var.0].value.values;
        assert_eq!(noise.len(), mv.len(), "noise length");
        let out: Vec<F> = mv
            .iter()
            .zip(vv)
            .zip(noise)
            .map(|((&m, &v), &n)| {
                debug_assert!(v >= F::zero(), "reparam_sample needs non-negative variance");
                m + v.sqrt() * n
            })
            .collect();
        let shape = self.shape(mean).to_vec();
        let ng = self.needs(&[mean.0, var.0]);
        self.push(
            Tensor {
                shape,
                values: out,
                requires_grad: false,
            },
            Op::Reparam {
                mean: mean.0,
                var: var.0,
                noise: noise.to_vec(),
            },
            ng,
        )
    }

    /// Per-row categorical negative log-likelihood `-ln probs[class]`;
    /// `probs` is `[.., K]` (rows must sum to one) and `classes` holds one
    /// class index per row. Output shape is `[rows, 1]`.
    pub fn categorical_nll(&mut self, probs: Var, classes: &[usize]) -> Var {
        let k = *self.shape(probs).last().unwrap();
        let rows = self.nodes[probs.0].value.rows();
        assert_eq!(classes.len(), rows, "one class index per row");
        let pv = &self.nodes[probs.0].value.values;
        let mut out = vec![F::zero(); rows];
        for r in 0..rows {
            assert!(classes[r] < k, "class index {} out of range", classes[r]);
            let p = pv[r * k + classes[r]];
            debug_assert!(p > F::zero(), "categorical_nll needs positive probability");
            out[r] = -p.ln();
        }
        let ng = self.needs(&[probs.0]);
        self.push(
            Tensor {
                shape: vec![rows, 1],
                values: out,
                requires_grad: false,
            },
            Op::CategoricalNll {
                probs: probs.0,
                classes: classes.to_vec(),
            },
            ng,
        )
    }

    // ---- backward ----

    /// Runs the reverse sweep from a scalar loss node and returns one
    /// gradient slot per node (None where no gradient flows).
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<F>>], id: usize) -> &'a mut [F] {
        if grads[id].is_none() {
            grads[id] = Some(vec![F::zero(); self.nodes[id].value.numel()]);
        }
        grads[id].as_mut().unwrap()
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let two = F::from_f64(2.0);
        let half = F::from_f64(0.5);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (id, _) in [(*a, 0), (*b, 1)] {
                    if self.nodes[id].needs_grad {
                        axpy(F::one(), g, self.grad_slot(grads, id));
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].needs_grad {
                    let bv = &self.nodes[*b].value.values;
                    let ga = self.grad_slot(grads, *a);
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                }
                if self.nodes[*b].needs_grad {
                    let av = &self.nodes[*a].value.values;
                    let gb = self.grad_slot(grads, *b);
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.nodes[*x].needs_grad {
                    axpy(*c, g, self.grad_slot(grads, *x));
                }
            }
            Op::AddScalar(x) => {
                if self.nodes[*x].needs_grad {
                    axpy(F::one(), g, self.grad_slot(grads, *x));
                }
            }
            Op::MatmulRows(x, w) => {
                let (k, m) = {
                    let ws = &self.nodes[*w].value.shape;
                    (ws[0], ws[1])
                };
                let rows = self.nodes[*x].value.rows();
                if self.nodes[*x].needs_grad {
                    let wv = &self.nodes[*w].value.values;
                    let gx = self.grad_slot(grads, *x);
                    mm_nt(g, wv, gx, rows, m, k);
                }
                if self.nodes[*w].needs_grad {
                    let xv = &self.nodes[*x].value.values;
                    let gw = self.grad_slot(grads, *w);
                    mm_tn(xv, g, gw, rows, k, m);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let sa = &self.nodes[*a].value.shape;
                let (bsz, n, k) = (sa[0], sa[1], sa[2]);
                let m = self.nodes[idx].value.shape[2];
                let av = &self.nodes[*a].value.values;
                let bv = &self.nodes[*b].value.values;
                if self.nodes[*a].needs_grad {
                    let ga = self.grad_slot(grads, *a);
                    for i in 0..bsz {
                        let gb_ = &g[i * n * m..(i + 1) * n * m];
                        let gao = &mut ga[i * n * k..(i + 1) * n * k];
                        if *transpose_b {
                            let bb = &bv[i * m * k..(i + 1) * m * k];
                            mm_nn(gb_, bb, gao, n, m, k);
                        } else {
                            let bb = &bv[i * k * m..(i + 1) * k * m];
                            mm_nt(gb_, bb, gao, n, m, k);
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let gbsl = self.grad_slot(grads, *b);
                    for i in 0..bsz {
                        let gr = &g[i * n * m..(i + 1) * n * m];
                        let ab = &av[i * n * k..(i + 1) * n * k];
                        if *transpose_b {
                            let gbo = &mut gbsl[i * m * k..(i + 1) * m * k];
                            mm_tn(gr, ab, gbo, n, m, k);
                        } else {
                            let gbo = &mut gbsl[i * k * m..(i + 1) * k * m];
                            mm_tn(ab, gr, gbo, n, k, m);
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                if self.nodes[*x].needs_grad {
                    axpy(F::one(), g, self.grad_slot(grads, *x));
                }
                if self.nodes[*b].needs_grad {
                    let d = self.nodes[*b].value.numel();
                    let rows = g.len() / d;
                    let gb = self.grad_slot(grads, *b);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::AddBatchVec { x, e } => {
                if self.nodes[*x].needs_grad {
                    axpy(F::one(), g, self.grad_slot(grads, *x));
                }
                if self.nodes[*e].needs_grad {
                    let es = &self.nodes[*e].value.shape;
                    let (bsz, d) = (es[0], es[1]);
                    let n = self.nodes[*x].value.shape[1];
                    let ge = self.grad_slot(grads, *e);
                    for b in 0..bsz {
                        for i in 0..n {
                            let base = (b * n + i) * d;
                            for j in 0..d {
                                ge[b * d + j] = ge[b * d + j] + g[base + j];
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.nodes[*x].needs_grad {
                    let xv = &self.nodes[*x].value.values;
                    let gx = self.grad_slot(grads, *x);
                    for i in 0..g.len() {
                        if xv[i] > F::zero() {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                }
            }
            Op::Softplus(x) => {
                if self.nodes[*x].needs_grad {
                    let xv = &self.nodes[*x].value.values;
                    let gx = self.grad_slot(grads, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * sigmoid(xv[i]);
                    }
                }
            }
            Op::Square(x) => {
                if self.nodes[*x].needs_grad {
                    let xv = &self.nodes[*x].value.values;
                    let gx = self.grad_slot(grads, *x);
                    for i in 0..g.len() {
                        gx[i] = gx[i] + two * xv[i] * g[i];
                    }
                }
            }
            Op::Softmax { x } => {
                if self.nodes[*x].needs_grad {
                    let y = &self.nodes[idx].value;
                    let d = y.last_dim();
                    let rows = y.rows();
                    let gx = self.grad_slot(grads, *x);
                    for r in 0..rows {
                        let yr = &y.values[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let s = dot(gr, yr);
                        let go = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            go[j] = go[j] + yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = self.nodes[*gain].value.numel();
                let rows = g.len() / d;
                let xv = &self.nodes[*x].value.values;
                let gv = &self.nodes[*gain].value.values;
                let eps = F::from_f64(LAYER_NORM_EPS);
                let inv_d = F::one() / F::from_f64(d as f64);
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut mu = F::zero();
                    for &v in row {
                        mu = mu + v;
                    }
                    mu = mu * inv_d;
                    let mut var = F::zero();
                    for &v in row {
                        let c = v - mu;
                        var = var + c * c;
                    }
                    var = var * inv_d;
                    let rstd = F::one() / (var + eps).sqrt();
                    if self.nodes[*gain].needs_grad || self.nodes[*bias].needs_grad {
                        {
                            let gg = self.grad_slot(grads, *gain);
                            for j in 0..d {
                                gg[j] = gg[j] + gr[j] * (row[j] - mu) * rstd;
                            }
                        }
                        {
                            let gb = self.grad_slot(grads, *bias);
                            for j in 0..d {
                                gb[j] = gb[j] + gr[j];
                            }
                        }
                    }
                    if self.nodes[*x].needs_grad {
                        let mut mean_dxh = F::zero();
                        let mut mean_dxh_xh = F::zero();
                        for j in 0..d {
                            let xh = (row[j] - mu) * rstd;
                            let dxh = gr[j] * gv[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xh;
                        }
                        mean_dxh = mean_dxh * inv_d;
                        mean_dxh_xh = mean_dxh_xh * inv_d;
                        let gx = self.grad_slot(grads, *x);
                        let go = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xh = (row[j] - mu) * rstd;
                            let dxh = gr[j] * gv[j];
                            go[j] = go[j] + rstd * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::MeanDim1 { x, mask } => {
                if self.nodes[*x].needs_grad {
                    let xs = &self.nodes[*x].value.shape;
                    let (bsz, n, d) = (xs[0], xs[1], xs[2]);
                    let gx = self.grad_slot(grads, *x);
                    for b in 0..bsz {
                        let cnt = match mask {
                            Some(m) => m[b * n..(b + 1) * n].iter().filter(|&&v| v).count(),
                            None => n,
                        };
                        let inv = F::one() / F::from_f64(cnt as f64);
                        for i in 0..n {
                            if mask.as_ref().is_none_or(|m| m[b * n + i]) {
                                let base = (b * n + i) * d;
                                for j in 0..d {
                                    gx[base + j] = gx[base + j] + g[b * d + j] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = self.nodes[idx].value.last_dim();
                let rows = self.nodes[idx].value.rows();
                let mut offset = 0usize;
                for &p in parts {
                    let d = self.nodes[p].value.last_dim();
                    if self.nodes[p].needs_grad {
                        let gp = self.grad_slot(grads, p);
                        for r in 0..rows {
                            for j in 0..d {
                                gp[r * d + j] = gp[r * d + j] + g[r * total + offset + j];
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::SliceLast { x, start } => {
                if self.nodes[*x].needs_grad {
                    let d = self.nodes[*x].value.last_dim();
                    let len = self.nodes[idx].value.last_dim();
                    let rows = self.nodes[idx].value.rows();
                    let gx = self.grad_slot(grads, *x);
                    for r in 0..rows {
                        for j in 0..len {
                            gx[r * d + start + j] = gx[r * d + start + j] + g[r * len + j];
                        }
                    }
                }
            }
            Op::TileDim0 { x } => {
                if self.nodes[*x].needs_grad {
                    let n = self.nodes[*x].value.numel();
                    let times = g.len() / n;
                    let gx = self.grad_slot(grads, *x);
                    for t in 0..times {
                        axpy(F::one(), &g[t * n..(t + 1) * n], gx);
                    }
                }
            }
            Op::TileDim1 { x } => {
                if self.nodes[*x].needs_grad {
                    let xs = &self.nodes[*x].value.shape;
                    let (bsz, d) = (xs[0], xs[2]);
                    let times = self.nodes[idx].value.shape[1];
                    let gx = self.grad_slot(grads, *x);
                    for b in 0..bsz {
                        for t in 0..times {
                            let base = (b * times + t) * d;
                            for j in 0..d {
                                gx[b * d + j] = gx[b * d + j] + g[base + j];
                            }
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if self.nodes[*x].needs_grad {
                    let xs = &self.nodes[*x].value.shape;
                    let (bsz, n, d) = (xs[0], xs[1], xs[2]);
                    let dh = d / heads;
                    let gx = self.grad_slot(grads, *x);
                    for b in 0..bsz {
                        for h in 0..*heads {
                            for i in 0..n {
                                let dst = (b * n + i) * d + h * dh;
                                let src = ((b * heads + h) * n + i) * dh;
                                for j in 0..dh {
                                    gx[dst + j] = gx[dst + j] + g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                if self.nodes[*x].needs_grad {
                    let os = &self.nodes[idx].value.shape;
                    let (bsz, n, d) = (os[0], os[1], os[2]);
                    let dh = d / heads;
                    let gx = self.grad_slot(grads, *x);
                    for b in 0..bsz {
                        for h in 0..*heads {
                            for i in 0..n {
                                let src = (b * n + i) * d + h * dh;
                                let dst = ((b * heads + h) * n + i) * dh;
                                for j in 0..dh {
                                    gx[dst + j] = gx[dst + j] + g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::SwapDims01(x) => {
                if self.nodes[*x].needs_grad {
                    let xs = &self.nodes[*x].value.shape;
                    let (a, b, d) = (xs[0], xs[1], xs[2]);
                    let gx = self.grad_slot(grads, *x);
                    for i in 0..a {
                        for j in 0..b {
                            let src = (j * a + i) * d;
                            let dst = (i * b + j) * d;
                            for l in 0..d {
                                gx[dst + l] = gx[dst + l] + g[src + l];
                            }
                        }
                    }
                }
            }
            Op::Permute0213(x) => {
                if self.nodes[*x].needs_grad {
                    let xs = &self.nodes[*x].value.shape;
                    let (a, b, c, d) = (xs[0], xs[1], xs[2], xs[3]);
                    let gx = self.grad_slot(grads, *x);
                    for i in 0..a {
                        for j in 0..b {
                            for l in 0..c {
                                let dst = ((i * b + j) * c + l) * d;
                                let src = ((i * c + l) * b + j) * d;
                                for e in 0..d {
                                    gx[dst + e] = gx[dst + e] + g[src + e];
                                }
                            }
                        }
                    }
                }
            }
            Op::RepeatInterleave0 { x, times } => {
                if self.nodes[*x].needs_grad {
                    let n = self.nodes[*x].value.numel();
                    let block = n / self.nodes[*x].value.shape[0];
                    let reps = self.nodes[idx].value.shape[0];
                    let gx = self.grad_slot(grads, *x);
                    for b in 0..reps {
                        let src = &g[b * block..(b + 1) * block];
                        let dst = (b / times) * block;
                        for (j, &v) in src.iter().enumerate() {
                            gx[dst + j] = gx[dst + j] + v;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.nodes[*x].needs_grad {
                    axpy(F::one(), g, self.grad_slot(grads, *x));
                }
            }
            Op::SumAll(x) => {
                if self.nodes[*x].needs_grad {
                    let gx = self.grad_slot(grads, *x);
                    for v in gx.iter_mut() {
                        *v = *v + g[0];
                    }
                }
            }
            Op::MaskedSumAll { x, row_mask } => {
                if self.nodes[*x].needs_grad {
                    let d = self.nodes[*x].value.last_dim();
                    let rows = self.nodes[*x].value.rows();
                    let gx = self.grad_slot(grads, *x);
                    for r in 0..rows {
                        if row_mask.as_ref().is_none_or(|m| m[r]) {
                            for j in 0..d {
                                gx[r * d + j] = gx[r * d + j] + g[0];
                            }
                        }
                    }
                }
            }
            Op::GaussianNll { mean, var, y } => {
                let mv = &self.nodes[*mean].value.values;
                let vv = &self.nodes[*var].value.values;
                if self.nodes[*mean].needs_grad {
                    let gm = self.grad_slot(grads, *mean);
                    for i in 0..g.len() {
                        gm[i] = gm[i] + g[i] * (mv[i] - y[i]) / vv[i];
                    }
                }
                if self.nodes[*var].needs_grad {
                    let gv = self.grad_slot(grads, *var);
                    for i in 0..g.len() {
                        let d = y[i] - mv[i];
                        gv[i] = gv[i] + g[i] * (half / vv[i] - d * d / (two * vv[i] * vv[i]));
                    }
                }
            }
            Op::GaussianKl { mq, vq, mp, vp } => {
                let mqv = &self.nodes[*mq].value.values;
                let vqv = &self.nodes[*vq].value.values;
                let mpv = &self.nodes[*mp].value.values;
                let vpv = &self.nodes[*vp].value.values;
                if self.nodes[*mq].needs_grad {
                    let gm = self.grad_slot(grads, *mq);
                    for i in 0..g.len() {
                        gm[i] = gm[i] + g[i] * (mqv[i] - mpv[i]) / vpv[i];
                    }
                }
                if self.nodes[*mp].needs_grad {
                    let gm = self.grad_slot(grads, *mp);
                    for i in 0..g.len() {
                        gm[i] = gm[i] - g[i] * (mqv[i] - mpv[i]) / vpv[i];
                    }
                }
                if self.nodes[*vq].needs_grad {
                    let gv = self.grad_slot(grads, *vq);
                    for i in 0..g.len() {
                        gv[i] = gv[i] + g[i] * half * (F::one() / vpv[i] - F::one() / vqv[i]);
                    }
                }
                if self.nodes[*vp].needs_grad {
                    let gv = self.grad_slot(grads, *vp);
                    for i in 0..g.len() {
                        let dm = mqv[i] - mpv[i];
                        gv[i] = gv[i]
                            + g[i] * half * (F::one() / vpv[i] - (vqv[i] + dm * dm) / (vpv[i] * vpv[i]));
                    }
                }
            }
            Op::Reparam { mean, var, noise } => {
                if self.nodes[*mean].needs_grad {
                    axpy(F::one(), g, self.grad_slot(grads, *mean));
                }
                if self.nodes[*var].needs_grad {
                    let vv = &self.nodes[*var].value.values;
                    let gv = self.grad_slot(grads, *var);
                    for i in 0..g.len() {
                        gv[i] = gv[i] + g[i] * noise[i] / (two * vv[i].sqrt());
                    }
                }
            }
            Op::CategoricalNll { probs, classes } => {
                if self.nodes[*probs].needs_grad {
                    let k = self.nodes[*probs].value.last_dim();
                    let pv = &self.nodes[*probs].value.values;
                    let gp = self.grad_slot(grads, *probs);
                    for (r, &cls) in classes.iter().enumerate() {
                        gp[r * k + cls] = gp[r * k + cls] - g[r] / pv[r * k + cls];
                    }
                }
            }
        }
    }
}

/// Gradient buffers produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to a node, if any flowed to it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }
}

fn softplus_stable<F: Real>(x: F) -> F {
    let cut = F::from_f64(20.0);
    if x > cut {
        x
    } else if x < -cut {
        x.exp()
    } else {
        (F::one() + x.exp()).ln()
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
