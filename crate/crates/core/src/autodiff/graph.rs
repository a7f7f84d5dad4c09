//! Tape of recorded array operations with a reverse sweep.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and the tape is acyclic by construction. `backward` walks
//! the tape once from the root towards the leaves, accumulating into each
//! parent's gradient slot (fan-out sums).

use std::ops::Range;

use super::array::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Array};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Sigmoid,
    Swish,
    Relu,
    Cos,
    Log,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Sigmoid => "sigmoid",
            Unary::Swish => "swish",
            Unary::Relu => "relu",
            Unary::Cos => "cos",
            Unary::Log => "log",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
    /// Right operand is broadcast over the leading axes of the left one.
    Binary(Var, Var, Binary),
    MatMul {
        a: Var,
        b: Var,
        batch_b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    GroupNorm {
        x: Var,
        rows: usize,
        groups: usize,
        width: usize,
        inv_std: Vec<f64>,
    },
    Sum {
        x: Var,
        axis_len: usize,
        inner: usize,
    },
    Concat {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        in_width: usize,
        start: usize,
        width: usize,
    },
    Reshape(Var),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Array>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(format!("axis {} out of range for shape {:?}", axis, shape));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` root with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    // ----------------------------------------------------------------------
    // element-wise

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if kind == Unary::Log {
            if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {}", bad)));
            }
        }
        let out = match kind {
            Unary::Neg => xv.map(|v| -v),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Swish => xv.map(|v| v * sigmoid(v)),
            Unary::Relu => xv.map(|v| v.max(0.0)),
            Unary::Cos => xv.map(f64::cos),
            Unary::Log => xv.map(f64::ln),
        };
        let rg = self.rg(x);
        self.push(out, Op::Unary(x, kind), rg, kind.name())
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Swish)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Cos)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg, "scale")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.nodes[x.0].value.map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp(x, lo, hi), rg, "clamp")
    }

    /// `a ∘ b` where `b`'s shape equals `a`'s or is a trailing suffix of it
    /// (a scalar broadcasts everywhere).
    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if !av.shape().ends_with(bv.shape()) {
            return shape_err(format!(
                "cannot broadcast {:?} onto {:?}",
                bv.shape(),
                av.shape()
            ));
        }
        let bl = bv.len();
        let bd = bv.data();
        let data: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[i % bl];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let out = Array::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        self.push(out, Op::Binary(a, b, kind), rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    // ----------------------------------------------------------------------
    // linear algebra

    /// Matrix product over the last two axes.
    ///
    /// `a: [..., m, k]`, `b: [..., k, n]`, where `b`'s leading (batch) axes
    /// are a suffix of `a`'s, so a plain `[k, n]` right operand is shared by
    /// every batch entry of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() < 2 || bsh.len() < 2 {
            return shape_err(format!("matmul needs rank ≥ 2, got {:?} and {:?}", ash, bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        if k != k2 || !a_batch.ends_with(b_batch) {
            return shape_err(format!("matmul {:?} · {:?}", ash, bsh));
        }
        let batch_a: usize = a_batch.iter().product();
        let batch_b: usize = b_batch.iter().product();
        let mut out = vec![0.0; batch_a * m * n];
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        if batch_b == 1 {
            gemm_acc(ad, bd, &mut out, batch_a * m, k, n);
        } else {
            for t in 0..batch_a {
                let tb = t % batch_b;
                gemm_acc(
                    &ad[t * m * k..(t + 1) * m * k],
                    &bd[tb * k * n..(tb + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = a_batch.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Array::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch_b,
                m,
                k,
                n,
            },
            rg,
            "matmul",
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() < 2 {
            return shape_err(format!("transpose needs rank ≥ 2, got {:?}", sh));
        }
        let (rows, cols) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; xd.len()];
        transpose_into(xd, &mut out, rows, cols);
        let mut shape = sh.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let rg = self.rg(x);
        self.push(Array::new(shape, out)?, Op::Transpose { x, rows, cols }, rg, "transpose")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let cols = *xv.shape().last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Array::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        self.push(out, Op::Softmax { x, cols }, rg, "softmax")
    }

    /// Normalizes each contiguous block of `width / groups` columns of every
    /// `[rows, width]` trailing matrix to zero mean and unit variance over the
    /// block's `rows · width / groups` entries. No affine parameters.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() < 2 {
            return shape_err(format!("group_norm needs rank ≥ 2, got {:?}", sh));
        }
        let (rows, width) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        if groups == 0 || width % groups != 0 {
            return shape_err(format!("width {} not divisible into {} groups", width, groups));
        }
        let gw = width / groups;
        let count = (rows * gw) as f64;
        let xd = self.nodes[x.0].value.data();
        let batch = xd.len() / (rows * width).max(1);
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = Vec::with_capacity(batch * groups);
        for b in 0..batch {
            let base = b * rows * width;
            for g in 0..groups {
                let cells = (0..rows).flat_map(|r| {
                    let s = base + r * width + g * gw;
                    s..s + gw
                });
                let mean = cells.clone().map(|i| xd[i]).sum::<f64>() / count;
                let var = cells.clone().map(|i| (xd[i] - mean).powi(2)).sum::<f64>() / count;
                let is = 1.0 / (var + eps).sqrt();
                for i in cells {
                    out[i] = (xd[i] - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let rg = self.rg(x);
        self.push(
            Array::new(sh, out)?,
            Op::GroupNorm {
                x,
                rows,
                groups,
                width,
                inv_std,
            },
            rg,
            "group_norm",
        )
    }

    // ----------------------------------------------------------------------
    // reductions and structure

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let (outer, axis_len, inner) = split_axis(&sh, axis)?;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let src = &xd[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = sh;
        shape.remove(axis);
        let rg = self.rg(x);
        self.push(Array::new(shape, out)?, Op::Sum { x, axis_len, inner }, rg, "sum")
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = split_axis(self.shape(x), axis)?.1;
        let s = self.sum(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of every entry, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let flat = self.reshape(x, vec![self.value(x).len()])?;
        self.sum(flat, 0)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = match xs.first() {
            Some(&v) => self.shape(v).to_vec(),
            None => return shape_err("concat of nothing"),
        };
        let (outer, _, inner) = split_axis(&first, axis)?;
        let mut total = 0;
        for &v in xs {
            let sh = self.shape(v);
            let ok = sh.len() == first.len()
                && sh[..axis] == first[..axis]
                && sh[axis + 1..] == first[axis + 1..];
            if !ok {
                return shape_err(format!("concat {:?} with {:?} on axis {}", first, sh, axis));
            }
            total += sh[axis];
        }
        let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let row = total * inner;
        let mut out = vec![0.0; outer * row];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let d = self.nodes[v.0].value.data();
            for o in 0..outer {
                out[o * row + off..o * row + off + w].copy_from_slice(&d[o * w..(o + 1) * w]);
            }
            off += w;
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(
            Array::new(shape, out)?,
            Op::Concat {
                xs: xs.to_vec(),
                widths,
            },
            rg,
            "concat",
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let (outer, axis_len, inner) = split_axis(&sh, axis)?;
        if range.start > range.end || range.end > axis_len {
            return shape_err(format!("slice {:?} out of range for axis of length {}", range, axis_len));
        }
        let in_width = axis_len * inner;
        let start = range.start * inner;
        let width = range.len() * inner;
        let xd = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&xd[o * in_width + start..o * in_width + start + width]);
        }
        let mut shape = sh;
        shape[axis] = range.len();
        let rg = self.rg(x);
        self.push(
            Array::new(shape, out)?,
            Op::Slice {
                x,
                in_width,
                start,
                width,
            },
            rg,
            "slice",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// Row lookup: `table: [V, d]` → `[indices.len(), d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let sh = self.shape(table).to_vec();
        if sh.len() != 2 {
            return shape_err(format!("gather table must be 2-D, got {:?}", sh));
        }
        let (rows, d) = (sh[0], sh[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return shape_err(format!("gather index {} out of range for {} rows", bad, rows));
        }
        let td = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            Array::new(vec![indices.len(), d], out)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
            "gather",
        )
    }

    // ----------------------------------------------------------------------
    // reverse sweep

    /// Propagates d(root)/d(node) to every node reachable from `root`,
    /// seeding the root with ones. Earlier gradients are discarded.
    pub fn backward(&mut self, root: Var) {
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backprop_node(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Array::zeros(nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                let xd = nodes[x.0].value.data();
                let yd = node.value.data();
                acc(*x, &|dst| {
                    for j in 0..dst.len() {
                        let (xv, yv) = (xd[j], yd[j]);
                        let dy = match kind {
                            Unary::Neg => -1.0,
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::Swish => {
                                let s = sigmoid(xv);
                                s + xv * s * (1.0 - s)
                            }
                            Unary::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Cos => -xv.sin(),
                            Unary::Log => 1.0 / xv,
                        };
                        dst[j] += gd[j] * dy;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|dst| {
                for (d, gv) in dst.iter_mut().zip(gd) {
                    *d += c * gv;
                }
            }),
            Op::Clamp(x, lo, hi) => {
                let xd = nodes[x.0].value.data();
                acc(*x, &|dst| {
                    for j in 0..dst.len() {
                        if xd[j] >= *lo && xd[j] <= *hi {
                            dst[j] += gd[j];
                        }
                    }
                })
            }
            Op::Binary(a, b, kind) => {
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                let bl = bd.len();
                acc(*a, &|dst| {
                    for j in 0..dst.len() {
                        dst[j] += match kind {
                            Binary::Add | Binary::Sub => gd[j],
                            Binary::Mul => gd[j] * bd[j % bl],
                        };
                    }
                });
                acc(*b, &|dst| {
                    for j in 0..gd.len() {
                        dst[j % bl] += match kind {
                            Binary::Add => gd[j],
                            Binary::Sub => -gd[j],
                            Binary::Mul => gd[j] * ad[j],
                        };
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                batch_b,
                m,
                k,
                n,
            } => {
                let (m, k, n, batch_b) = (*m, *k, *n, *batch_b);
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                let batch_a = ad.len() / (m * k).max(1);
                // dA = G · Bᵀ
                acc(*a, &|dst| {
                    if batch_b == 1 {
                        gemm_nt_acc(gd, bd, dst, batch_a * m, n, k);
                    } else {
                        for t in 0..batch_a {
                            let tb = t % batch_b;
                            gemm_nt_acc(
                                &gd[t * m * n..(t + 1) * m * n],
                                &bd[tb * k * n..(tb + 1) * k * n],
                                &mut dst[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &|dst| {
                    if batch_b == 1 {
                        gemm_tn_acc(ad, gd, dst, batch_a * m, k, n);
                    } else {
                        for t in 0..batch_a {
                            let tb = t % batch_b;
                            gemm_tn_acc(
                                &ad[t * m * k..(t + 1) * m * k],
                                &gd[t * m * n..(t + 1) * m * n],
                                &mut dst[tb * k * n..(tb + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => acc(*x, &|dst| {
                // the output is [cols, rows] per batch entry
                let mut tmp = vec![0.0; gd.len()];
                transpose_into(gd, &mut tmp, *cols, *rows);
                for (d, t) in dst.iter_mut().zip(&tmp) {
                    *d += t;
                }
            }),
            Op::Softmax { x, cols } => {
                let yd = node.value.data();
                acc(*x, &|dst| {
                    for r in 0..yd.len() / cols {
                        let s = r * cols;
                        let dot: f64 = (s..s + cols).map(|j| gd[j] * yd[j]).sum();
                        for j in s..s + cols {
                            dst[j] += yd[j] * (gd[j] - dot);
                        }
                    }
                })
            }
            Op::GroupNorm {
                x,
                rows,
                groups,
                width,
                inv_std,
            } => {
                let yd = node.value.data();
                let (rows, groups, width) = (*rows, *groups, *width);
                let gw = width / groups;
                let count = (rows * gw) as f64;
                acc(*x, &|dst| {
                    let batch = yd.len() / (rows * width).max(1);
                    for b in 0..batch {
                        let base = b * rows * width;
                        for gi in 0..groups {
                            let cells = (0..rows).flat_map(|r| {
                                let s = base + r * width + gi * gw;
                                s..s + gw
                            });
                            let mg = cells.clone().map(|j| gd[j]).sum::<f64>() / count;
                            let mgy = cells.clone().map(|j| gd[j] * yd[j]).sum::<f64>() / count;
                            let is = inv_std[b * groups + gi];
                            for j in cells {
                                dst[j] += is * (gd[j] - mg - yd[j] * mgy);
                            }
                        }
                    }
                })
            }
            Op::Sum { x, axis_len, inner } => acc(*x, &|dst| {
                let (axis_len, inner) = (*axis_len, *inner);
                for (j, d) in dst.iter_mut().enumerate() {
                    let o = j / (axis_len * inner);
                    let r = j % inner;
                    *d += gd[o * inner + r];
                }
            }),
            Op::Concat { xs, widths } => {
                let row: usize = widths.iter().sum();
                let outer = gd.len() / row.max(1);
                let mut off = 0;
                for (&v, &w) in xs.iter().zip(widths) {
                    acc(v, &|dst| {
                        for o in 0..outer {
                            for (d, s) in dst[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(&gd[o * row + off..o * row + off + w])
                            {
                                *d += s;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Slice {
                x,
                in_width,
                start,
                width,
            } => acc(*x, &|dst| {
                let outer = gd.len() / (*width).max(1);
                for o in 0..outer {
                    let d0 = o * in_width + start;
                    for (d, s) in dst[d0..d0 + width].iter_mut().zip(&gd[o * width..(o + 1) * width]) {
                        *d += s;
                    }
                }
            }),
            Op::Reshape(x) => acc(*x, &|dst| {
                for (d, s) in dst.iter_mut().zip(gd) {
                    *d += s;
                }
            }),
            Op::Gather { table, indices } => {
                let d = node.value.shape()[1];
                acc(*table, &|dst| {
                    for (r, &i) in indices.iter().enumerate() {
                        for (t, s) in dst[i * d..(i + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *t += s;
                        }
                    }
                })
            }
        }
    }
}

/// Batched transpose of `[rows, cols]` blocks.
fn transpose_into(src: &[f64], dst: &mut [f64], rows: usize, cols: usize) {
    let block = rows * cols;
    if block == 0 {
        return;
    }
    for b in 0..src.len() / block {
        let s = &src[b * block..(b + 1) * block];
        let d = &mut dst[b * block..(b + 1) * block];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
}
