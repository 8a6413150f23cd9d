//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are methods on [`Tape`]. When the tape is recording and at
//! least one operand carries a node id, the result is appended to the tape
//! together with whatever the backward rule needs; otherwise the op is a plain
//! computation and the result is a constant. The same model code therefore
//! serves both training (recording tape) and inference ([`Tape::inference`]).
//!
//! Broadcasting is limited to scalar-with-tensor for `add`, `sub` and `mul`.
//! Every other op requires exact shape agreement and reports both shapes when
//! it is violated.

mod kernels;
mod tensor;

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::math;

pub use tensor::Tensor;

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Sparse, constant row mixing: output row `out` accumulates `weight · input
/// row in` for every entry, in entry order.
#[derive(Clone, Debug, Default)]
pub struct RowPlan {
    pub out_rows: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl RowPlan {
    pub fn new(out_rows: usize) -> Self {
        Self {
            out_rows,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, out: usize, input: usize, weight: f64) {
        self.entries.push((out, input, weight));
    }

    /// Plan that copies the listed input rows, in order.
    pub fn gather(rows: &[usize]) -> Self {
        Self {
            out_rows: rows.len(),
            entries: rows.iter().enumerate().map(|(o, &i)| (o, i, 1.0)).collect(),
        }
    }
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Arc<Vec<f64>>,
        bv: Arc<Vec<f64>>,
    },
    Scale {
        a: NodeId,
        s: f64,
    },
    MatMul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        av: Arc<Vec<f64>>,
        bv: Arc<Vec<f64>>,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Option<NodeId>,
        w: Option<NodeId>,
        b: Option<NodeId>,
        xv: Arc<Vec<f64>>,
        wv: Arc<Vec<f64>>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Tanh {
        a: NodeId,
        out: Arc<Vec<f64>>,
    },
    Relu {
        a: NodeId,
        xv: Arc<Vec<f64>>,
    },
    Map {
        a: NodeId,
        xv: Arc<Vec<f64>>,
        df: fn(f64) -> f64,
    },
    ConcatLast {
        parts: Vec<(Option<NodeId>, usize)>,
        rows: usize,
    },
    ConcatRows {
        parts: Vec<(Option<NodeId>, usize)>,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    RowScale {
        a: NodeId,
        factors: Vec<f64>,
    },
    RowCombine {
        a: NodeId,
        plan: RowPlan,
        cols: usize,
    },
    LayerNorm {
        x: Option<NodeId>,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        gv: Arc<Vec<f64>>,
        n: usize,
    },
    Reshape {
        a: NodeId,
    },
}

struct Node {
    op: Op,
    len: usize,
}

/// Operation recorder. One tape per forward/backward pass; never shared
/// between concurrent writers.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradient buffers returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` reached the loss.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        t.node()
            .and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `t`; zeros when `t` did not influence the loss.
    pub fn wrt(&self, t: &Tensor) -> Vec<f64> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.len()],
        }
    }
}

fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that never records: every op is evaluated eagerly and returns a
    /// constant. Used for inference.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a differentiable leaf (a parameter or an input whose
    /// gradient is wanted).
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        if !self.recording {
            return t.detach();
        }
        let id = self.push(Op::Leaf, t.len());
        t.with_node(Some(id))
    }

    fn push(&mut self, op: Op, len: usize) -> NodeId {
        self.nodes.push(Node { op, len });
        self.nodes.len() - 1
    }

    fn tracked(&self, ids: &[Option<NodeId>]) -> bool {
        self.recording && ids.iter().any(Option::is_some)
    }

    fn output(&mut self, shape: Vec<usize>, data: Vec<f64>, op: impl FnOnce() -> Op, ids: &[Option<NodeId>]) -> Tensor {
        let node = if self.tracked(ids) {
            let len = data.len();
            Some(self.push(op(), len))
        } else {
            None
        };
        Tensor::from_parts(shape, data, node)
    }

    fn binary(&mut self, kind: BinaryKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let op_name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let shape = if a.shape() == b.shape() {
            a.shape().to_vec()
        } else if b.is_scalar() {
            a.shape().to_vec()
        } else if a.is_scalar() {
            b.shape().to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        };
        let len: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let ai = |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
        let bi = |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
        let data: Vec<f64> = match kind {
            BinaryKind::Add if ad.len() == bd.len() => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
            BinaryKind::Sub if ad.len() == bd.len() => ad.iter().zip(bd).map(|(x, y)| x - y).collect(),
            BinaryKind::Mul if ad.len() == bd.len() => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
            BinaryKind::Add => (0..len).map(|i| ai(i) + bi(i)).collect(),
            BinaryKind::Sub => (0..len).map(|i| ai(i) - bi(i)).collect(),
            BinaryKind::Mul => (0..len).map(|i| ai(i) * bi(i)).collect(),
        };
        let ids = [a.node(), b.node()];
        Ok(self.output(
            shape,
            data,
            || Op::Binary {
                kind,
                a: a.node(),
                b: b.node(),
                av: a.shared(),
                bv: b.shared(),
            },
            &ids,
        ))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        let data = a.data().iter().map(|v| v * s).collect();
        let ids = [a.node()];
        self.output(a.shape().to_vec(), data, || Op::Scale { a: a.node().unwrap(), s }, &ids)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        };
        let (m, k) = match *a.shape() {
            [m, k] => (m, k),
            _ => return Err(mismatch()),
        };
        let n = match *b.shape() {
            [k2, n] if k2 == k => n,
            _ => return Err(mismatch()),
        };
        let mut data = vec![0.0; m * n];
        kernels::matmul_acc(&mut data, a.data(), b.data(), m, k, n);
        let ids = [a.node(), b.node()];
        Ok(self.output(
            vec![m, n],
            data,
            || Op::MatMul {
                a: a.node(),
                b: b.node(),
                av: a.shared(),
                bv: b.shared(),
                m,
                k,
                n,
            },
            &ids,
        ))
    }

    /// Affine map of every last-axis vector: `x · w + bias` with `w: [in, out]`
    /// and `bias: [out]`. The bias is added to each row explicitly; this is
    /// not general broadcasting.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (inp, out) = match *w.shape() {
            [i, o] => (i, o),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    left: x.shape().to_vec(),
                    right: w.shape().to_vec(),
                })
            }
        };
        if x.cols() != inp || x.shape().is_empty() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
            });
        }
        if bias.shape() != [out] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: vec![out],
                right: bias.shape().to_vec(),
            });
        }
        let rows = x.rows();
        let mut data = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            data.extend_from_slice(bias.data());
        }
        kernels::matmul_acc(&mut data, x.data(), w.data(), rows, inp, out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let ids = [x.node(), w.node(), bias.node()];
        Ok(self.output(
            shape,
            data,
            || Op::Linear {
                x: x.node(),
                w: w.node(),
                b: bias.node(),
                xv: x.shared(),
                wv: w.shared(),
                rows,
                inp,
                out,
            },
            &ids,
        ))
    }

    pub fn tanh(&mut self, a: &Tensor) -> Tensor {
        let out = Arc::new(a.data().iter().map(|&v| math::tanh(v)).collect::<Vec<f64>>());
        let node = if self.tracked(&[a.node()]) {
            let op = Op::Tanh {
                a: a.node().unwrap(),
                out: Arc::clone(&out),
            };
            Some(self.push(op, out.len()))
        } else {
            None
        };
        Tensor::from_shared(a.shape().to_vec(), out, node)
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let ids = [a.node()];
        self.output(
            a.shape().to_vec(),
            data,
            || Op::Relu {
                a: a.node().unwrap(),
                xv: a.shared(),
            },
            &ids,
        )
    }

    /// Custom elementwise function with a caller-supplied derivative.
    pub fn map(&mut self, a: &Tensor, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Tensor {
        let data = a.data().iter().map(|&v| f(v)).collect();
        let ids = [a.node()];
        self.output(
            a.shape().to_vec(),
            data,
            || Op::Map {
                a: a.node().unwrap(),
                xv: a.shared(),
                df,
            },
            &ids,
        )
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat of zero tensors"))?;
        if first.shape().is_empty() {
            return Err(invalid("concat_last needs at least one axis"));
        }
        let lead = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            if p.shape().is_empty() || &p.shape()[..p.shape().len() - 1] != lead {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let rows = first.rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ids: Vec<_> = parts.iter().map(|p| p.node()).collect();
        Ok(self.output(
            shape,
            data,
            || Op::ConcatLast {
                parts: parts.iter().map(|p| (p.node(), p.cols())).collect(),
                rows,
            },
            &ids,
        ))
    }

    /// Concatenation along the first axis; trailing axes must agree.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("concat of zero tensors"))?;
        if first.shape().is_empty() {
            return Err(invalid("concat_rows needs at least one axis"));
        }
        let tail = &first.shape()[1..];
        let mut lead = 0;
        for p in parts {
            if p.shape().is_empty() || &p.shape()[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
            lead += p.shape()[0];
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        let ids: Vec<_> = parts.iter().map(|p| p.node()).collect();
        Ok(self.output(
            shape,
            data,
            || Op::ConcatRows {
                parts: parts.iter().map(|p| (p.node(), p.len())).collect(),
            },
            &ids,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum();
        let ids = [a.node()];
        self.output(Vec::new(), vec![s], || Op::Sum { a: a.node().unwrap() }, &ids)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum::<f64>() / a.len() as f64;
        let ids = [a.node()];
        self.output(Vec::new(), vec![s], || Op::Mean { a: a.node().unwrap() }, &ids)
    }

    /// Multiplies last-axis vector `r` by the constant `factors[r]`.
    pub fn row_scale(&mut self, a: &Tensor, factors: &[f64]) -> Result<Tensor> {
        if factors.len() != a.rows() {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                left: a.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let c = a.cols();
        let mut data = a.to_vec();
        for (row, &f) in data.chunks_exact_mut(c).zip(factors) {
            for v in row {
                *v *= f;
            }
        }
        let ids = [a.node()];
        Ok(self.output(
            a.shape().to_vec(),
            data,
            || Op::RowScale {
                a: a.node().unwrap(),
                factors: factors.to_vec(),
            },
            &ids,
        ))
    }

    /// Constant sparse mixing of last-axis vectors; see [`RowPlan`].
    /// The result has shape `[plan.out_rows, cols]`.
    pub fn row_combine(&mut self, a: &Tensor, plan: RowPlan) -> Result<Tensor> {
        let (rows, c) = (a.rows(), a.cols());
        if let Some(&(o, i, _)) = plan.entries.iter().find(|&&(o, i, _)| o >= plan.out_rows || i >= rows) {
            return Err(invalid(alloc::format!(
                "row plan entry ({o}, {i}) out of range for {} output rows and input shape {:?}",
                plan.out_rows,
                a.shape()
            )));
        }
        let mut data = vec![0.0; plan.out_rows * c];
        let src = a.data();
        for &(o, i, w) in &plan.entries {
            kernels::axpy(&mut data[o * c..(o + 1) * c], w, &src[i * c..(i + 1) * c]);
        }
        let shape = vec![plan.out_rows, c];
        let ids = [a.node()];
        Ok(self.output(
            shape,
            data,
            || Op::RowCombine {
                a: a.node().unwrap(),
                plan,
                cols: c,
            },
            &ids,
        ))
    }

    /// Row selection; shorthand for [`Tape::row_combine`] with unit weights.
    pub fn gather_rows(&mut self, a: &Tensor, rows: &[usize]) -> Result<Tensor> {
        self.row_combine(a, RowPlan::gather(rows))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != a.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: a.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let t = a.with_node(None).reshaped(shape.to_vec());
        if self.tracked(&[a.node()]) {
            let id = self.push(Op::Reshape { a: a.node().unwrap() }, a.len());
            return Ok(t.with_node(Some(id)));
        }
        Ok(t)
    }

    /// Standardizes every last-axis vector to zero mean and unit (population)
    /// variance, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        if !(eps > 0.0) {
            return Err(invalid(alloc::format!("layer_norm eps must be > 0, got {eps}")));
        }
        let n = x.cols();
        if x.shape().is_empty() {
            return Err(invalid("layer_norm needs at least one axis"));
        }
        for (name, p) in [("layer_norm gain", gain), ("layer_norm bias", bias)] {
            if p.shape() != [n] {
                return Err(Error::ShapeMismatch {
                    op: name,
                    left: x.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        let rows = x.rows();
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(x.len());
        let (g, b) = (gain.data(), bias.data());
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let ids = [x.node(), gain.node(), bias.node()];
        Ok(self.output(
            x.shape().to_vec(),
            data,
            || Op::LayerNorm {
                x: x.node(),
                gain: gain.node(),
                bias: bias.node(),
                xhat,
                inv_std,
                gv: gain.shared(),
                n,
            },
            &ids,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited once, in
    /// reverse recording order, and gradients of shared inputs accumulate.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = loss.node().ok_or(Error::NotRecorded)?;
        if root >= self.nodes.len() || self.nodes[root].len != 1 {
            return Err(Error::NotRecorded);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let lens = |id: NodeId| self.nodes[id].len;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, av, bv } => {
                for (side, id) in [(0, a), (1, b)] {
                    let Some(id) = *id else { continue };
                    let len = lens(id);
                    let other = if side == 0 { bv } else { av };
                    let sign = if *kind == BinaryKind::Sub && side == 1 { -1.0 } else { 1.0 };
                    let ga = acc(grads, id, len);
                    let oth = |i: usize| if other.len() == 1 { other[0] } else { other[i] };
                    if len == g.len() {
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => kernels::axpy(ga, sign, g),
                            BinaryKind::Mul => {
                                for (i, (gv, &gi)) in ga.iter_mut().zip(g).enumerate() {
                                    *gv += gi * oth(i);
                                }
                            }
                        }
                    } else {
                        // Scalar operand broadcast over the output.
                        let s: f64 = match kind {
                            BinaryKind::Add | BinaryKind::Sub => sign * g.iter().sum::<f64>(),
                            BinaryKind::Mul => g.iter().enumerate().map(|(i, gi)| gi * oth(i)).sum(),
                        };
                        ga[0] += s;
                    }
                }
            }
            Op::Scale { a, s } => {
                let len = lens(*a);
                kernels::axpy(acc(grads, *a, len), *s, g);
            }
            Op::MatMul { a, b, av, bv, m, k, n } => {
                if let Some(a) = *a {
                    kernels::matmul_bt_acc(acc(grads, a, m * k), g, bv, *m, *k, *n);
                }
                if let Some(b) = *b {
                    kernels::matmul_at_acc(acc(grads, b, k * n), av, g, *m, *k, *n);
                }
            }
            Op::Linear { x, w, b, xv, wv, rows, inp, out } => {
                if let Some(x) = *x {
                    kernels::matmul_bt_acc(acc(grads, x, rows * inp), g, wv, *rows, *inp, *out);
                }
                if let Some(w) = *w {
                    kernels::matmul_at_acc(acc(grads, w, inp * out), xv, g, *rows, *inp, *out);
                }
                if let Some(b) = *b {
                    let gb = acc(grads, b, *out);
                    for row in g.chunks_exact(*out) {
                        kernels::add_into(gb, row);
                    }
                }
            }
            Op::Tanh { a, out } => {
                let ga = acc(grads, *a, out.len());
                for ((gv, &gi), &y) in ga.iter_mut().zip(g).zip(out.iter()) {
                    *gv += gi * (1.0 - y * y);
                }
            }
            Op::Relu { a, xv } => {
                let ga = acc(grads, *a, xv.len());
                for ((gv, &gi), &x) in ga.iter_mut().zip(g).zip(xv.iter()) {
                    if x > 0.0 {
                        *gv += gi;
                    }
                }
            }
            Op::Map { a, xv, df } => {
                let ga = acc(grads, *a, xv.len());
                for ((gv, &gi), &x) in ga.iter_mut().zip(g).zip(xv.iter()) {
                    *gv += gi * df(x);
                }
            }
            Op::ConcatLast { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(id, w) in parts {
                    if let Some(id) = id {
                        let gp = acc(grads, id, rows * w);
                        for r in 0..*rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            kernels::add_into(&mut gp[r * w..(r + 1) * w], src);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &(id, len) in parts {
                    if let Some(id) = id {
                        kernels::add_into(acc(grads, id, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::Sum { a } => {
                let len = lens(*a);
                for v in acc(grads, *a, len).iter_mut() {
                    *v += g[0];
                }
            }
            Op::Mean { a } => {
                let len = lens(*a);
                let s = g[0] / len as f64;
                for v in acc(grads, *a, len).iter_mut() {
                    *v += s;
                }
            }
            Op::RowScale { a, factors } => {
                let len = lens(*a);
                let c = len / factors.len();
                let ga = acc(grads, *a, len);
                for ((grow, srow), &f) in ga.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(factors) {
                    kernels::axpy(grow, f, srow);
                }
            }
            Op::RowCombine { a, plan, cols } => {
                let len = lens(*a);
                let c = *cols;
                let ga = acc(grads, *a, len);
                for &(o, i, w) in &plan.entries {
                    kernels::axpy(&mut ga[i * c..(i + 1) * c], w, &g[o * c..(o + 1) * c]);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std, gv, n } => {
                let n = *n;
                if let Some(gid) = *gain {
                    let gg = acc(grads, gid, n);
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((d, &gi), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *d += gi * h;
                        }
                    }
                }
                if let Some(bid) = *bias {
                    let gb = acc(grads, bid, n);
                    for grow in g.chunks_exact(n) {
                        kernels::add_into(gb, grow);
                    }
                }
                if let Some(xid) = *x {
                    let gx = acc(grads, xid, xhat.len());
                    let mut dh = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks_exact(n).zip(xhat.chunks_exact(n)).enumerate() {
                        for ((d, &gi), &gain_j) in dh.iter_mut().zip(grow).zip(gv.iter()) {
                            *d = gi * gain_j;
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                        let is = inv_std[r];
                        for ((out, &d), &h) in gx[r * n..(r + 1) * n].iter_mut().zip(&dh).zip(hrow) {
                            *out += is * (d - mean_dh - h * mean_dh_h);
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                let len = lens(*a);
                kernels::add_into(acc(grads, *a, len), g);
            }
        }
    }
}

#[cfg(test)]
mod tests;
