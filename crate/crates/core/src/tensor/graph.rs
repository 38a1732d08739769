//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass: each operation appends
//! a node holding its value, shape, and parent references. Because nodes only
//! ever reference earlier nodes, the tape order is already topological and
//! [`Graph::backward`] is a single reverse sweep. Nothing is mutated in
//! place, so a node's recorded value stays valid for its consumers' gradient
//! rules.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{GradMap, ParamSet, Tensor};

/// Probabilities are clamped to this range before the logs in the
/// cross-entropy, avoiding the singularities at 0 and 1.
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Graph`]'s tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    GlobalAvgPool(NodeId),
    Concat(NodeId, NodeId),
    InnerProduct(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, F),
    AddConst(NodeId, F),
    Square(NodeId),
    Sqrt(NodeId),
    MulScalar(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    SumScalars(Vec<NodeId>),
    Bce { prob: NodeId, label: u8 },
}

#[derive(Debug)]
struct Node<F: Scalar> {
    value: Vec<F>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op<F>,
}

/// Computation tape. Single-threaded: one graph is built, evaluated, and
/// differentiated by one execution context.
#[derive(Debug)]
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: Vec<(String, NodeId)>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Conv geometry shared by forward and backward.
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

/// Output-coordinate range `[lo, hi)` with `0 ≤ o·stride + k − padding < limit`.
fn valid_out_range(stride: usize, padding: usize, k: usize, limit: usize, out_limit: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k + stride - 1) / stride
    } else {
        0
    };
    let hi = if limit + padding > k {
        ((limit + padding - k - 1) / stride + 1).min(out_limit)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, op: &'static str, value: Vec<F>, shape: Vec<usize>, requires_grad: bool, node_op: Op<F>) -> Result<NodeId> {
        if cfg!(debug_assertions) && !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(op.to_string()));
        }
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op: node_op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn node(&self, id: NodeId) -> &Node<F> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<F> {
        let node = self.node(id);
        if node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "expected scalar node, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.value[0])
    }

    /// Tensor snapshot of a node's current value.
    pub fn tensor_value(&self, id: NodeId) -> Tensor<F> {
        let node = self.node(id);
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    /// Non-differentiable input leaf.
    pub fn input(&mut self, tensor: &Tensor<F>) -> Result<NodeId> {
        self.push("input", tensor.data().to_vec(), tensor.shape().to_vec(), false, Op::Leaf)
    }

    /// Trainable parameter leaf, registered under `name` for the [`GradMap`].
    pub fn param(&mut self, name: &str, tensor: &Tensor<F>) -> Result<NodeId> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!(
                "parameter {name:?} registered twice on the same graph"
            )));
        }
        let id = self.push("param", tensor.data().to_vec(), tensor.shape().to_vec(), true, Op::Leaf)?;
        self.params.push((name.to_string(), id));
        Ok(id)
    }

    /// Register every parameter of a [`ParamSet`] on this graph; returns the
    /// node ids in the set's order.
    pub fn params(&mut self, set: &ParamSet<F>) -> Result<Vec<NodeId>> {
        set.iter().map(|(name, t)| self.param(name, t)).collect()
    }

    fn conv_dims(&self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<ConvDims> {
        let in_shape = self.shape(input);
        let k_shape = self.shape(kernel).to_vec();
        let (batch, c_in, h, w) = match *in_shape {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::Dimension {
                    op: "conv2d input",
                    lhs: in_shape.to_vec(),
                    rhs: k_shape,
                })
            }
        };
        let [c_out, kc, kh, kw] = match *k_shape.as_slice() {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(Error::Dimension {
                    op: "conv2d kernel",
                    lhs: in_shape.to_vec(),
                    rhs: k_shape,
                })
            }
        };
        if kc != c_in || stride < 1 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: in_shape.to_vec(),
                rhs: k_shape,
            });
        }
        Ok(ConvDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// 2-D cross-correlation. Input is `[C,H,W]` or `[N,C,H,W]`; the output
    /// keeps the input's rank.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let d = self.conv_dims(input, kernel, stride, padding)?;
        let x = &self.node(input).value;
        let k = &self.node(kernel).value;
        let mut out = vec![F::zero(); d.batch * d.c_out * d.out_h * d.out_w];
        for n in 0..d.batch {
            for co in 0..d.c_out {
                let out_base = (n * d.c_out + co) * d.out_h * d.out_w;
                for ci in 0..d.c_in {
                    let in_base = (n * d.c_in + ci) * d.h * d.w;
                    let k_base = (co * d.c_in + ci) * d.kh * d.kw;
                    for ky in 0..d.kh {
                        let (oy_lo, oy_hi) = valid_out_range(stride, padding, ky, d.h, d.out_h);
                        for kx in 0..d.kw {
                            let kv = k[k_base + ky * d.kw + kx];
                            let (ox_lo, ox_hi) = valid_out_range(stride, padding, kx, d.w, d.out_w);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + ky - padding;
                                let in_row = &x[in_base + iy * d.w..in_base + (iy + 1) * d.w];
                                let out_row =
                                    &mut out[out_base + oy * d.out_w..out_base + (oy + 1) * d.out_w];
                                if stride == 1 {
                                    // ix = ox + kx − padding, contiguous in ox.
                                    let ix_lo = ox_lo + kx - padding;
                                    let src = &in_row[ix_lo..ix_lo + (ox_hi - ox_lo)];
                                    for (o, &s) in out_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                        *o = *o + kv * s;
                                    }
                                } else {
                                    for ox in ox_lo..ox_hi {
                                        let ix = ox * stride + kx - padding;
                                        out_row[ox] = out_row[ox] + kv * in_row[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let shape = if self.shape(input).len() == 3 {
            vec![d.c_out, d.out_h, d.out_w]
        } else {
            vec![d.batch, d.c_out, d.out_h, d.out_w]
        };
        let rg = self.node(input).requires_grad || self.node(kernel).requires_grad;
        self.push("conv2d", out, shape, rg, Op::Conv2d { input, kernel, stride, padding })
    }

    /// `weight · input (+ bias)` for a rank-1 input and `[m,n]` weight.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        let valid = in_shape.len() == 1 && w_shape.len() == 2 && w_shape[1] == in_shape[0];
        if !valid {
            return Err(Error::Dimension {
                op: "dense",
                lhs: w_shape,
                rhs: in_shape,
            });
        }
        let (m, n) = (w_shape[0], w_shape[1]);
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(Error::Dimension {
                    op: "dense bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![m],
                });
            }
        }
        let x = &self.node(input).value;
        let w = &self.node(weight).value;
        let mut out = vec![F::zero(); m];
        for i in 0..m {
            let row = &w[i * n..(i + 1) * n];
            let mut acc = F::zero();
            for j in 0..n {
                acc = acc + row[j] * x[j];
            }
            out[i] = acc;
        }
        if let Some(b) = bias {
            let bv = &self.node(b).value;
            for i in 0..m {
                out[i] = out[i] + bv[i];
            }
        }
        let rg = self.node(input).requires_grad
            || self.node(weight).requires_grad
            || bias.map(|b| self.node(b).requires_grad).unwrap_or(false);
        self.push("dense", out, vec![m], rg, Op::Dense { input, weight, bias })
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let out: Vec<F> = self.node(input).value.iter().map(|&v| v.max(F::zero())).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.node(input).requires_grad;
        self.push("relu", out, shape, rg, Op::Relu(input))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        let out: Vec<F> = self
            .node(input)
            .value
            .iter()
            .map(|&v| F::one() / (F::one() + (-v).exp()))
            .collect();
        let shape = self.shape(input).to_vec();
        let rg = self.node(input).requires_grad;
        self.push("sigmoid", out, shape, rg, Op::Sigmoid(input))
    }

    /// Per-channel mean of a `[C,H,W]` map.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        let [c, h, w] = match *shape.as_slice() {
            [c, h, w] => [c, h, w],
            _ => {
                return Err(Error::Dimension {
                    op: "global_avg_pool",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        let x = &self.node(input).value;
        let area = F::of_f64((h * w) as f64);
        let out: Vec<F> = (0..c)
            .map(|ci| {
                let mut acc = F::zero();
                for i in 0..h * w {
                    acc = acc + x[ci * h * w + i];
                }
                acc / area
            })
            .collect();
        let rg = self.node(input).requires_grad;
        self.push("global_avg_pool", out, vec![c], rg, Op::GlobalAvgPool(input))
    }

    /// Concatenation of two rank-1 tensors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 1 || self.shape(b).len() != 1 {
            return Err(Error::Dimension {
                op: "concat",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.node(a).value.clone();
        out.extend_from_slice(&self.node(b).value);
        let len = out.len();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push("concat", out, vec![len], rg, Op::Concat(a, b))
    }

    /// Σ aᵢ·bᵢ for equal-length rank-1 tensors.
    pub fn inner_product(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a).len() != 1 || self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "inner_product",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = &self.node(a).value;
        let bv = &self.node(b).value;
        let mut acc = F::zero();
        for i in 0..av.len() {
            acc = acc + av[i] * bv[i];
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push("inner_product", vec![acc], vec![1], rg, Op::InnerProduct(a, b))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<F> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push("add", out, shape, rg, Op::Add(a, b))
    }

    pub fn scale(&mut self, input: NodeId, factor: F) -> Result<NodeId> {
        let out: Vec<F> = self.node(input).value.iter().map(|&v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.node(input).requires_grad;
        self.push("scale", out, shape, rg, Op::Scale(input, factor))
    }

    pub fn add_const(&mut self, input: NodeId, c: F) -> Result<NodeId> {
        let out: Vec<F> = self.node(input).value.iter().map(|&v| v + c).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.node(input).requires_grad;
        self.push("add_const", out, shape, rg, Op::AddConst(input, c))
    }

    pub fn square(&mut self, input: NodeId) -> Result<NodeId> {
        let out: Vec<F> = self.node(input).value.iter().map(|&v| v * v).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.node(input).requires_grad;
        self.push("square", out, shape, rg, Op::Square(input))
    }

    pub fn sqrt(&mut self, input: NodeId) -> Result<NodeId> {
        let out: Vec<F> = self.node(input).value.iter().map(|&v| v.sqrt()).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.node(input).requires_grad;
        self.push("sqrt", out, shape, rg, Op::Sqrt(input))
    }

    /// Product of two scalar nodes.
    pub fn mul_scalar(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.scalar_value(a)?, self.scalar_value(b)?);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push("mul_scalar", vec![x * y], vec![1], rg, Op::MulScalar(a, b))
    }

    /// Quotient of two scalar nodes.
    pub fn div_scalar(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.scalar_value(a)?, self.scalar_value(b)?);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        self.push("div_scalar", vec![x / y], vec![1], rg, Op::DivScalar(a, b))
    }

    /// Sum of scalar nodes, in the given (deterministic) order.
    pub fn sum_scalars(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Contract("sum_scalars over an empty list".into()));
        }
        let mut acc = F::zero();
        let mut rg = false;
        for &t in terms {
            acc = acc + self.scalar_value(t)?;
            rg = rg || self.node(t).requires_grad;
        }
        self.push("sum_scalars", vec![acc], vec![1], rg, Op::SumScalars(terms.to_vec()))
    }

    /// Binary cross-entropy of a scalar probability against a 0/1 label,
    /// with the probability clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
    pub fn bce(&mut self, prob: NodeId, label: u8) -> Result<NodeId> {
        if label > 1 {
            return Err(Error::Contract(format!("bce label must be 0 or 1, got {label}")));
        }
        let p = self.scalar_value(prob)?;
        let p = Self::clamp_prob(p);
        let y = F::of_f64(label as f64);
        let one = F::one();
        let loss = -(y * p.ln() + (one - y) * (one - p).ln());
        let rg = self.node(prob).requires_grad;
        self.push("bce", vec![loss], vec![1], rg, Op::Bce { prob, label })
    }

    fn clamp_prob(p: F) -> F {
        let lo = F::of_f64(PROB_CLAMP);
        let hi = F::one() - lo;
        p.max(lo).min(hi)
    }

    /// Reverse sweep from a scalar `loss`. Returns one gradient per
    /// registered parameter; parameters not contributing to the loss get
    /// zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap<F>> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adjoint: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = adjoint[idx].clone() else { continue };
            self.scatter(idx, &grad, &mut adjoint);
        }

        let mut entries = Vec::with_capacity(self.params.len());
        for (name, id) in &self.params {
            let g = adjoint[id.0]
                .take()
                .unwrap_or_else(|| vec![F::zero(); self.nodes[id.0].value.len()]);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {name:?}")));
            }
            entries.push((name.clone(), g));
        }
        Ok(GradMap::from_entries(entries))
    }

    fn acc_into(adjoint: &mut [Option<Vec<F>>], id: NodeId, len: usize) -> &mut Vec<F> {
        adjoint[id.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn scatter(&self, idx: usize, grad: &[F], adjoint: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, stride, padding } => {
                let d = self
                    .conv_dims(*input, *kernel, *stride, *padding)
                    .expect("shapes validated at construction");
                let x = &self.nodes[input.0].value;
                let k = &self.nodes[kernel.0].value;
                let (stride, padding) = (*stride, *padding);
                if needs(*input) {
                    let dx = Self::acc_into(adjoint, *input, x.len());
                    for n in 0..d.batch {
                        for co in 0..d.c_out {
                            let out_base = (n * d.c_out + co) * d.out_h * d.out_w;
                            for ci in 0..d.c_in {
                                let in_base = (n * d.c_in + ci) * d.h * d.w;
                                let k_base = (co * d.c_in + ci) * d.kh * d.kw;
                                for ky in 0..d.kh {
                                    let (oy_lo, oy_hi) =
                                        valid_out_range(stride, padding, ky, d.h, d.out_h);
                                    for kx in 0..d.kw {
                                        let kv = k[k_base + ky * d.kw + kx];
                                        let (ox_lo, ox_hi) =
                                            valid_out_range(stride, padding, kx, d.w, d.out_w);
                                        if ox_lo >= ox_hi {
                                            continue;
                                        }
                                        for oy in oy_lo..oy_hi {
                                            let iy = oy * stride + ky - padding;
                                            let grad_row = &grad
                                                [out_base + oy * d.out_w..out_base + (oy + 1) * d.out_w];
                                            let dx_row =
                                                &mut dx[in_base + iy * d.w..in_base + (iy + 1) * d.w];
                                            if stride == 1 {
                                                let ix_lo = ox_lo + kx - padding;
                                                let dst = &mut dx_row[ix_lo..ix_lo + (ox_hi - ox_lo)];
                                                for (o, &g) in dst.iter_mut().zip(&grad_row[ox_lo..ox_hi]) {
                                                    *o = *o + kv * g;
                                                }
                                            } else {
                                                for ox in ox_lo..ox_hi {
                                                    let ix = ox * stride + kx - padding;
                                                    dx_row[ix] = dx_row[ix] + kv * grad_row[ox];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if needs(*kernel) {
                    let dk = Self::acc_into(adjoint, *kernel, k.len());
                    for n in 0..d.batch {
                        for co in 0..d.c_out {
                            let out_base = (n * d.c_out + co) * d.out_h * d.out_w;
                            for ci in 0..d.c_in {
                                let in_base = (n * d.c_in + ci) * d.h * d.w;
                                let k_base = (co * d.c_in + ci) * d.kh * d.kw;
                                for ky in 0..d.kh {
                                    let (oy_lo, oy_hi) =
                                        valid_out_range(stride, padding, ky, d.h, d.out_h);
                                    for kx in 0..d.kw {
                                        let (ox_lo, ox_hi) =
                                            valid_out_range(stride, padding, kx, d.w, d.out_w);
                                        if ox_lo >= ox_hi {
                                            continue;
                                        }
                                        let mut acc = F::zero();
                                        for oy in oy_lo..oy_hi {
                                            let iy = oy * stride + ky - padding;
                                            let grad_row = &grad
                                                [out_base + oy * d.out_w..out_base + (oy + 1) * d.out_w];
                                            let in_row =
                                                &x[in_base + iy * d.w..in_base + (iy + 1) * d.w];
                                            if stride == 1 {
                                                let ix_lo = ox_lo + kx - padding;
                                                let src = &in_row[ix_lo..ix_lo + (ox_hi - ox_lo)];
                                                for (&g, &s) in grad_row[ox_lo..ox_hi].iter().zip(src) {
                                                    acc = acc + g * s;
                                                }
                                            } else {
                                                for ox in ox_lo..ox_hi {
                                                    let ix = ox * stride + kx - padding;
                                                    acc = acc + grad_row[ox] * in_row[ix];
                                                }
                                            }
                                        }
                                        let pos = k_base + ky * d.kw + kx;
                                        dk[pos] = dk[pos] + acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Dense { input, weight, bias } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (m, n) = (self.nodes[idx].value.len(), x.len());
                if needs(*input) {
                    let dx = Self::acc_into(adjoint, *input, n);
                    for i in 0..m {
                        for j in 0..n {
                            dx[j] = dx[j] + grad[i] * w[i * n + j];
                        }
                    }
                }
                if needs(*weight) {
                    let dw = Self::acc_into(adjoint, *weight, w.len());
                    for i in 0..m {
                        for j in 0..n {
                            dw[i * n + j] = dw[i * n + j] + grad[i] * x[j];
                        }
                    }
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        let db = Self::acc_into(adjoint, *b, m);
                        for i in 0..m {
                            db[i] = db[i] + grad[i];
                        }
                    }
                }
            }
            Op::Relu(input) => {
                if needs(*input) {
                    let x = &self.nodes[input.0].value;
                    let dx = Self::acc_into(adjoint, *input, x.len());
                    for i in 0..x.len() {
                        if x[i] > F::zero() {
                            dx[i] = dx[i] + grad[i];
                        }
                    }
                }
            }
            Op::Sigmoid(input) => {
                if needs(*input) {
                    let s = &self.nodes[idx].value;
                    let dx = Self::acc_into(adjoint, *input, s.len());
                    for i in 0..s.len() {
                        dx[i] = dx[i] + grad[i] * s[i] * (F::one() - s[i]);
                    }
                }
            }
            Op::GlobalAvgPool(input) => {
                if needs(*input) {
                    let shape = &self.nodes[input.0].shape;
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let inv_area = F::one() / F::of_f64((h * w) as f64);
                    let dx = Self::acc_into(adjoint, *input, c * h * w);
                    for ci in 0..c {
                        let g = grad[ci] * inv_area;
                        for i in 0..h * w {
                            dx[ci * h * w + i] = dx[ci * h * w + i] + g;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let p = self.nodes[a.0].value.len();
                let q = self.nodes[b.0].value.len();
                if needs(*a) {
                    let da = Self::acc_into(adjoint, *a, p);
                    for i in 0..p {
                        da[i] = da[i] + grad[i];
                    }
                }
                if needs(*b) {
                    let db = Self::acc_into(adjoint, *b, q);
                    for i in 0..q {
                        db[i] = db[i] + grad[p + i];
                    }
                }
            }
            Op::InnerProduct(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let g = grad[0];
                if needs(*a) {
                    let da = Self::acc_into(adjoint, *a, av.len());
                    for i in 0..av.len() {
                        da[i] = da[i] + g * bv[i];
                    }
                }
                if needs(*b) {
                    let db = Self::acc_into(adjoint, *b, bv.len());
                    for i in 0..bv.len() {
                        db[i] = db[i] + g * av[i];
                    }
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if needs(id) {
                        let d = Self::acc_into(adjoint, id, grad.len());
                        for i in 0..grad.len() {
                            d[i] = d[i] + grad[i];
                        }
                    }
                }
            }
            Op::Scale(input, factor) => {
                if needs(*input) {
                    let d = Self::acc_into(adjoint, *input, grad.len());
                    for i in 0..grad.len() {
                        d[i] = d[i] + grad[i] * *factor;
                    }
                }
            }
            Op::AddConst(input, _) => {
                if needs(*input) {
                    let d = Self::acc_into(adjoint, *input, grad.len());
                    for i in 0..grad.len() {
                        d[i] = d[i] + grad[i];
                    }
                }
            }
            Op::Square(input) => {
                if needs(*input) {
                    let x = self.nodes[input.0].value.clone();
                    let two = F::of_f64(2.0);
                    let d = Self::acc_into(adjoint, *input, x.len());
                    for i in 0..x.len() {
                        d[i] = d[i] + grad[i] * two * x[i];
                    }
                }
            }
            Op::Sqrt(input) => {
                if needs(*input) {
                    let s = self.nodes[idx].value.clone();
                    let half = F::of_f64(0.5);
                    let d = Self::acc_into(adjoint, *input, s.len());
                    for i in 0..s.len() {
                        d[i] = d[i] + grad[i] * half / s[i];
                    }
                }
            }
            Op::MulScalar(a, b) => {
                let (x, y) = (self.nodes[a.0].value[0], self.nodes[b.0].value[0]);
                if needs(*a) {
                    let d = Self::acc_into(adjoint, *a, 1);
                    d[0] = d[0] + grad[0] * y;
                }
                if needs(*b) {
                    let d = Self::acc_into(adjoint, *b, 1);
                    d[0] = d[0] + grad[0] * x;
                }
            }
            Op::DivScalar(a, b) => {
                let (x, y) = (self.nodes[a.0].value[0], self.nodes[b.0].value[0]);
                if needs(*a) {
                    let d = Self::acc_into(adjoint, *a, 1);
                    d[0] = d[0] + grad[0] / y;
                }
                if needs(*b) {
                    let d = Self::acc_into(adjoint, *b, 1);
                    d[0] = d[0] - grad[0] * x / (y * y);
                }
            }
            Op::SumScalars(terms) => {
                for &t in terms {
                    if needs(t) {
                        let d = Self::acc_into(adjoint, t, 1);
                        d[0] = d[0] + grad[0];
                    }
                }
            }
            Op::Bce { prob, label } => {
                if needs(*prob) {
                    let p = Self::clamp_prob(self.nodes[prob.0].value[0]);
                    let y = F::of_f64(*label as f64);
                    let one = F::one();
                    // d/dp of −(y·ln p + (1−y)·ln(1−p)), at the clamped p.
                    let dp = -(y / p) + (one - y) / (one - p);
                    let d = Self::acc_into(adjoint, *prob, 1);
                    d[0] = d[0] + grad[0] * dp;
                }
            }
        }
    }
}
