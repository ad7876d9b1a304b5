use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

/// A recorded operation together with whatever the backward rule needs
/// beyond the input and output values.
#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    Offset(NodeId),
    BroadcastTo(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    SumAll(NodeId),
    SumAxis {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Gelu(NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        rstd: Vec<T>,
    },
    L2Norm(NodeId),
    ClampMin(NodeId, T),
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    Gather {
        x: NodeId,
        idx: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(NodeId, Vec<usize>)>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
        batch: usize,
        out_channels: usize,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Offset(x)
            | Op::BroadcastTo(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::SumAll(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::L2Norm(x)
            | Op::ClampMin(x, _) => vec![*x],
            Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::ScatterRows { parts } => parts.iter().map(|(p, _)| *p).collect(),
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::BroadcastTo(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::MatMul { .. } => "matmul",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Norm(..) => "l2_norm",
            Op::ClampMin(..) => "clamp_min",
            Op::GatherRows { .. } => "gather_rows",
            Op::Gather { .. } => "gather",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; node ids are therefore a
/// topological order of the computation graph.
pub struct Tape<T: Scalar = f64> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
    check_finite: bool,
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T: Scalar = f64> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: NodeId,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records backward information.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            record: true,
            check_finite: false,
        }
    }

    /// Forward-only evaluation: values are kept, nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    /// Panic as soon as any operation produces NaN or infinity.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), false)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.check(&value, "leaf");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        self.check(&value, op.name());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn check(&self, value: &Tensor<T>, what: &str) {
        if self.check_finite {
            assert!(value.all_finite(), "non-finite value produced by {what}");
        }
    }

    pub(crate) fn value(&self, id: NodeId) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            backward_rule(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Gradients of leaf nodes after a backward sweep.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros when nothing downstream depended on it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: NodeId,
    contribution: impl FnOnce() -> Vec<T>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    let c = contribution();
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(c) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(c),
    }
}

fn backward_rule<T: Scalar>(
    nodes: &[Node<T>],
    id: NodeId,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let out = &nodes[id].value;
    let val = |i: NodeId| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, || g.to_vec());
            accumulate(nodes, grads, *b, || g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, || g.to_vec());
            accumulate(nodes, grads, *b, || g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, || {
                g.iter().zip(bv.data()).map(|(&g, &b)| g * b).collect()
            });
            accumulate(nodes, grads, *b, || {
                g.iter().zip(av.data()).map(|(&g, &a)| g * a).collect()
            });
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, || {
                g.iter().zip(bv.data()).map(|(&g, &b)| g / b).collect()
            });
            accumulate(nodes, grads, *b, || {
                g.iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect()
            });
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, || g.iter().map(|&v| v * *c).collect()),
        Op::Offset(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, || g.to_vec()),
        Op::BroadcastTo(x) => accumulate(nodes, grads, *x, || {
            kernels::reduce_to(g, val(*x).shape(), out.shape())
        }),
        Op::Permute(x, axes) => accumulate(nodes, grads, *x, || {
            kernels::permute(g, out.shape(), &kernels::inverse_permutation(axes)).0
        }),
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (av, bv) = (val(a).data(), val(b).data());
            accumulate(nodes, grads, a, || {
                let mut da = vec![T::zero(); batch * m * k];
                for s in 0..batch {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    let bs = &bv[s * k * n..(s + 1) * k * n];
                    let das = &mut da[s * m * k..(s + 1) * m * k];
                    // dA = g·Bᵀ (or g·B when B was used transposed)
                    kernels::gemm(m, n, k, gs, false, bs, !trans_b, das, false);
                }
                da
            });
            accumulate(nodes, grads, b, || {
                let mut db = vec![T::zero(); batch * k * n];
                for s in 0..batch {
                    let gs = &g[s * m * n..(s + 1) * m * n];
                    let as_ = &av[s * m * k..(s + 1) * m * k];
                    let dbs = &mut db[s * k * n..(s + 1) * k * n];
                    if trans_b {
                        kernels::gemm(n, m, k, gs, true, as_, false, dbs, false);
                    } else {
                        kernels::gemm(k, m, n, as_, true, gs, false, dbs, false);
                    }
                }
                db
            });
        }
        Op::SumAll(x) => accumulate(nodes, grads, *x, || vec![g[0]; val(*x).numel()]),
        &Op::SumAxis {
            x,
            outer,
            len,
            inner,
        } => accumulate(nodes, grads, x, || {
            let mut dx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for l in 0..len {
                    let base = (o * len + l) * inner;
                    dx[base..base + inner].copy_from_slice(src);
                }
            }
            dx
        }),
        &Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => accumulate(nodes, grads, x, || {
            let y = out.data();
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        dx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            dx
        }),
        Op::Gelu(x) => accumulate(nodes, grads, *x, || {
            g.iter()
                .zip(val(*x).data())
                .map(|(&g, &x)| g * gelu_grad(x))
                .collect()
        }),
        Op::Relu(x) => accumulate(nodes, grads, *x, || {
            g.iter()
                .zip(val(*x).data())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect()
        }),
        Op::LayerNorm { x, rstd } => accumulate(nodes, grads, *x, || {
            let xhat = out.data();
            let width = *out.shape().last().unwrap();
            let inv = T::one() / T::of(width as f64);
            let mut dx = vec![T::zero(); xhat.len()];
            for (r, &s) in rstd.iter().enumerate() {
                let span = r * width..(r + 1) * width;
                let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                let mean_g = gr.iter().copied().sum::<T>() * inv;
                let mean_gx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() * inv;
                for ((d, &gv), &xv) in dx[span].iter_mut().zip(gr).zip(xr) {
                    *d = s * (gv - mean_g - xv * mean_gx);
                }
            }
            dx
        }),
        Op::L2Norm(x) => accumulate(nodes, grads, *x, || {
            let xv = val(*x).data();
            let norms = out.data();
            let width = xv.len() / norms.len();
            let mut dx = vec![T::zero(); xv.len()];
            for (r, &nrm) in norms.iter().enumerate() {
                if nrm > T::zero() {
                    let scale = g[r] / nrm;
                    for c in r * width..(r + 1) * width {
                        dx[c] = scale * xv[c];
                    }
                }
            }
            dx
        }),
        Op::ClampMin(x, floor) => accumulate(nodes, grads, *x, || {
            g.iter()
                .zip(val(*x).data())
                .map(|(&g, &x)| if x > *floor { g } else { T::zero() })
                .collect()
        }),
        Op::GatherRows { x, idx } => accumulate(nodes, grads, *x, || {
            let xv = val(*x);
            let width = xv.numel() / xv.shape()[0];
            let mut dx = vec![T::zero(); xv.numel()];
            for (r, &src) in idx.iter().enumerate() {
                for c in 0..width {
                    dx[src * width + c] += g[r * width + c];
                }
            }
            dx
        }),
        Op::Gather { x, idx } => accumulate(nodes, grads, *x, || {
            let mut dx = vec![T::zero(); val(*x).numel()];
            for (r, &src) in idx.iter().enumerate() {
                dx[src] += g[r];
            }
            dx
        }),
        Op::ScatterRows { parts } => {
            let width = out.numel() / out.shape()[0];
            for (p, idx) in parts {
                accumulate(nodes, grads, *p, || {
                    let mut dp = Vec::with_capacity(idx.len() * width);
                    for &dst in idx {
                        dp.extend_from_slice(&g[dst * width..(dst + 1) * width]);
                    }
                    dp
                });
            }
        }
        &Op::Conv2d {
            x,
            w,
            b,
            geom,
            batch,
            out_channels,
        } => {
            let (xv, wv) = (val(x).data(), val(w).data());
            let (rows, px) = (geom.col_rows(), geom.pixels());
            let in_len = geom.channels * px;
            let out_len = out_channels * px;
            let mut cols = vec![T::zero(); rows * px];
            let mut dcols = vec![T::zero(); rows * px];
            let mut dw = vec![T::zero(); out_channels * rows];
            let mut dx = vec![T::zero(); batch * in_len];
            let need_w = nodes[w].requires_grad;
            let need_x = nodes[x].requires_grad;
            for s in 0..batch {
                let gs = &g[s * out_len..(s + 1) * out_len];
                if need_w {
                    kernels::im2col(&xv[s * in_len..(s + 1) * in_len], geom, &mut cols);
                    kernels::gemm(out_channels, px, rows, gs, false, &cols, true, &mut dw, true);
                }
                if need_x {
                    kernels::gemm(rows, out_channels, px, wv, true, gs, false, &mut dcols, false);
                    kernels::col2im(&dcols, geom, &mut dx[s * in_len..(s + 1) * in_len]);
                }
            }
            accumulate(nodes, grads, x, || dx);
            accumulate(nodes, grads, w, || dw);
            accumulate(nodes, grads, b, || {
                let mut db = vec![T::zero(); out_channels];
                for s in 0..batch {
                    for (c, d) in db.iter_mut().enumerate() {
                        let base = s * out_len + c * px;
                        *d += g[base..base + px].iter().copied().sum::<T>();
                    }
                }
                db
            });
        }
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}
