use std::sync::atomic::{AtomicU32, Ordering};

use super::{matmul_into, softmax_in_place, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(0);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u32,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    ScaleBy { x: usize, s: usize },
    Sigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Exp(usize),
    Ln(usize),
    ClampMin(usize, f64),
    Softmax { x: usize, axis: usize, temperature: f64 },
    MaskedSoftmax { x: usize, mask: Vec<bool>, temperature: f64 },
    Transpose(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    MeanRows(usize),
    SumAll(usize),
    Gather { table: usize, indices: Vec<usize> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Operation tape. Nodes are appended in evaluation order, so reverse
/// index order is a valid reverse topological order.
#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v);
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v);
        self.nodes[v.idx].requires_grad
    }

    /// Gradient of the last backward's loss with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.check(v);
        let g = self.grads.get(v.idx)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.idx].value.shape.clone(),
            data: g.clone(),
        })
    }

    fn check(&self, v: Var) {
        assert_eq!(v.graph, self.id, "Var used with a graph it does not belong to");
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            graph: self.id,
            idx,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        self.check(v);
        &self.nodes[v.idx].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.val(a).shape, &self.val(b).shape);
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn unary_map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.val(x);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(&[x.idx]);
        self.push(value, rg, op)
    }

    fn binary_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.val(a), self.val(b));
        let value = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        let rg = self.rg(&[a.idx, b.idx]);
        Ok(self.push(value, rg, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::matmul_values(self.val(a), self.val(b))?;
        let rg = self.rg(&[a.idx, b.idx]);
        Ok(self.push(value, rg, Op::MatMul(a.idx, b.idx)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("add", a, b, Op::Add(a.idx, b.idx), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("sub", a, b, Op::Sub(a.idx, b.idx), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_map("mul", a, b, Op::Mul(a.idx, b.idx), |x, y| x * y)
    }

    /// `x[m×n] + row[1×n]`, broadcasting the row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.val(x), self.val(row));
        let (_, n) = vx.dims2()?;
        if vr.shape != [1, n] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vx.shape.clone(),
                rhs: vr.shape.clone(),
            });
        }
        let data = vx
            .data
            .chunks(n)
            .flat_map(|r| r.iter().zip(&vr.data).map(|(a, b)| a + b))
            .collect();
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.rg(&[x.idx, row.idx]);
        Ok(self.push(value, rg, Op::AddRow(x.idx, row.idx)))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary_map(x, Op::AddScalar(x.idx), |v| v + c)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary_map(x, Op::Scale(x.idx, c), |v| v * c)
    }

    /// Multiplies every entry of `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let vs = self.val(s);
        if vs.len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.val(x).shape.clone(),
                rhs: vs.shape.clone(),
            });
        }
        let c = vs.data[0];
        let vx = self.val(x);
        let value = Tensor {
            shape: vx.shape.clone(),
            data: vx.data.iter().map(|v| v * c).collect(),
        };
        let rg = self.rg(&[x.idx, s.idx]);
        Ok(self.push(value, rg, Op::ScaleBy { x: x.idx, s: s.idx }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary_map(x, Op::Sigmoid(x.idx), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary_map(x, Op::Tanh(x.idx), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary_map(x, Op::Gelu(x.idx), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary_map(x, Op::Exp(x.idx), f64::exp)
    }

    /// Natural log; every input entry must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.val(x).data.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("ln of non-positive value {bad}")));
        }
        Ok(self.unary_map(x, Op::Ln(x.idx), f64::ln))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.unary_map(x, Op::ClampMin(x.idx, min), |v| v.max(min))
    }

    /// Softmax of a matrix along `axis` (0: down columns, 1: across rows)
    /// with logits divided by `temperature` before exponentiation.
    pub fn softmax(&mut self, x: Var, axis: usize, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let vx = self.val(x);
        let (m, n) = vx.dims2()?;
        let mut data = vx.data.clone();
        match axis {
            1 => data.chunks_mut(n).for_each(|r| softmax_in_place(r, temperature)),
            0 => {
                let mut col = vec![0.0; m];
                for j in 0..n {
                    for i in 0..m {
                        col[i] = data[i * n + j];
                    }
                    softmax_in_place(&mut col, temperature);
                    for i in 0..m {
                        data[i * n + j] = col[i];
                    }
                }
            }
            _ => {
                return Err(Error::Contract(format!(
                    "softmax axis must be 0 or 1 for a matrix, got {axis}"
                )))
            }
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.rg(&[x.idx]);
        Ok(self.push(
            value,
            rg,
            Op::Softmax {
                x: x.idx,
                axis,
                temperature,
            },
        ))
    }

    /// Softmax of a `1 × n` row restricted to entries where `mask` is true;
    /// masked-out entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool], temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let vx = self.val(x);
        if vx.shape != [1, mask.len()] {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: vx.shape.clone(),
                rhs: vec![1, mask.len()],
            });
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::Contract("masked_softmax needs at least one active entry".into()));
        }
        let active: Vec<f64> = vx
            .data
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        let mut probs = active;
        softmax_in_place(&mut probs, temperature);
        let mut it = probs.into_iter();
        let data = mask
            .iter()
            .map(|&m| if m { it.next().expect("active count") } else { 0.0 })
            .collect();
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.rg(&[x.idx]);
        Ok(self.push(
            value,
            rg,
            Op::MaskedSoftmax {
                x: x.idx,
                mask: mask.to_vec(),
                temperature,
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.val(x);
        let (m, n) = vx.dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = vx.data[i * n + j];
            }
        }
        let value = Tensor {
            shape: vec![n, m],
            data,
        };
        let rg = self.rg(&[x.idx]);
        Ok(self.push(value, rg, Op::Transpose(x.idx)))
    }

    /// Per-row layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.val(x);
        let (m, n) = vx.dims2()?;
        for p in [gamma, beta] {
            let vp = self.val(p);
            if vp.shape != [1, n] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vx.shape.clone(),
                    rhs: vp.shape.clone(),
                });
            }
        }
        let (g, b) = (&self.val(gamma).data, &self.val(beta).data);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &vx.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                data[i * n + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        let rg = self.rg(&[x.idx, gamma.idx, beta.idx]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x: x.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean over rows: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.val(x);
        let (m, n) = vx.dims2()?;
        let mut data = vec![0.0; n];
        for row in vx.data.chunks(n) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        let rg = self.rg(&[x.idx]);
        Ok(self.push(
            Tensor {
                shape: vec![1, n],
                data,
            },
            rg,
            Op::MeanRows(x.idx),
        ))
    }

    /// Sum of every entry as a `1 × 1` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.val(x).data.iter().sum();
        let rg = self.rg(&[x.idx]);
        self.push(Tensor::scalar(s), rg, Op::SumAll(x.idx))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.val(table);
        let (m, n) = vt.dims2()?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(Error::Bounds {
                    what: "table rows",
                    index: i,
                    len: m,
                });
            }
            data.extend_from_slice(&vt.data[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[table.idx]);
        Ok(self.push(
            Tensor {
                shape: vec![indices.len(), n],
                data,
            },
            rg,
            Op::Gather {
                table: table.idx,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.val(x);
        let (m, n) = vx.dims2()?;
        if len == 0 || start + len > n {
            return Err(Error::Bounds {
                what: "columns",
                index: start + len,
                len: n,
            });
        }
        let data = vx
            .data
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x.idx]);
        Ok(self.push(
            Tensor {
                shape: vec![m, len],
                data,
            },
            rg,
            Op::SliceCols { x: x.idx, start },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (m, _) = self.val(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.val(p).dims2()?;
            if pm != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.val(first).shape.clone(),
                    rhs: self.val(p).shape.clone(),
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p).data[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor {
                shape: vec![m, total],
                data,
            },
            rg,
            Op::ConcatCols(ids),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (_, n) = self.val(first).dims2()?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.val(p).dims2()?;
            if pn != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.val(first).shape.clone(),
                    rhs: self.val(p).shape.clone(),
                });
            }
            m += pm;
            data.extend_from_slice(&self.val(p).data);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::ConcatRows(ids),
        ))
    }

    /// Sum of several same-shape tensors, left to right.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts
            .split_first()
            .ok_or_else(|| Error::Contract("sum of zero tensors".into()))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// Reverse pass from a scalar loss. Runs at most once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss);
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new graph".into(),
            ));
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.idx].value.shape
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);

        for idx in (0..=loss.idx).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = &nodes[idx].value;
        let wants = |i: usize| nodes[i].requires_grad;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[i].requires_grad {
                let g = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]);
                f(g);
            }
        };
        let pointwise = |x: usize, acc: &mut dyn FnMut(usize, &mut dyn FnMut(&mut [f64])), d: &dyn Fn(usize) -> f64| {
            acc(x, &mut |g| {
                for (k, gk) in g.iter_mut().enumerate() {
                    *gk += gy[k] * d(k);
                }
            });
        };

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k) = (va.shape[0], va.shape[1]);
                let n = vb.shape[1];
                if wants(*a) {
                    acc(*a, &mut |g| {
                        // dA = dC · Bᵀ
                        for i in 0..m {
                            let gy_row = &gy[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = &vb.data[p * n..(p + 1) * n];
                                let s: f64 = gy_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                                g[i * k + p] += s;
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |g| {
                        // dB = Aᵀ · dC
                        let mut at = vec![0.0; k * m];
                        for i in 0..m {
                            for p in 0..k {
                                at[p * m + i] = va.data[i * k + p];
                            }
                        }
                        matmul_into(&at, gy, g, k, m, n);
                    });
                }
            }
            Op::Add(a, b) => {
                for i in [*a, *b] {
                    acc(i, &mut |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x += d));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x += d));
                acc(*b, &mut |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[*a].value.data, &nodes[*b].value.data);
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * vb[k];
                    }
                });
                acc(*b, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += gy[k] * va[k];
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a += d));
                let n = nodes[*row].value.len();
                acc(*row, &mut |g| {
                    for r in gy.chunks(n) {
                        g.iter_mut().zip(r).for_each(|(a, d)| *a += d);
                    }
                });
            }
            Op::AddScalar(x) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a += d));
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a += c * d));
            }
            Op::ScaleBy { x, s } => {
                let c = nodes[*s].value.data[0];
                let vx = &nodes[*x].value.data;
                acc(*x, &mut |g| g.iter_mut().zip(gy).for_each(|(a, d)| *a += c * d));
                acc(*s, &mut |g| {
                    g[0] += gy.iter().zip(vx).map(|(d, v)| d * v).sum::<f64>();
                });
            }
            Op::Sigmoid(x) => pointwise(*x, &mut acc, &|k| y.data[k] * (1.0 - y.data[k])),
            Op::Tanh(x) => pointwise(*x, &mut acc, &|k| 1.0 - y.data[k] * y.data[k]),
            Op::Exp(x) => pointwise(*x, &mut acc, &|k| y.data[k]),
            Op::Ln(x) => {
                let vx = &nodes[*x].value.data;
                pointwise(*x, &mut acc, &|k| 1.0 / vx[k]);
            }
            Op::ClampMin(x, min) => {
                let vx = &nodes[*x].value.data;
                pointwise(*x, &mut acc, &|k| if vx[k] >= *min { 1.0 } else { 0.0 });
            }
            Op::Gelu(x) => {
                let vx = &nodes[*x].value.data;
                pointwise(*x, &mut acc, &|k| gelu_grad(vx[k]));
            }
            Op::Softmax { x, axis, temperature } => {
                let (m, n) = (y.shape[0], y.shape[1]);
                acc(*x, &mut |g| {
                    let (outer, inner, stride_o, stride_i) = if *axis == 1 {
                        (m, n, n, 1)
                    } else {
                        (n, m, 1, n)
                    };
                    for o in 0..outer {
                        let at = |i: usize| o * stride_o + i * stride_i;
                        let dot: f64 = (0..inner).map(|i| gy[at(i)] * y.data[at(i)]).sum();
                        for i in 0..inner {
                            g[at(i)] += y.data[at(i)] * (gy[at(i)] - dot) / temperature;
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x, mask, temperature } => {
                acc(*x, &mut |g| {
                    let dot: f64 = (0..mask.len())
                        .filter(|&i| mask[i])
                        .map(|i| gy[i] * y.data[i])
                        .sum();
                    for i in (0..mask.len()).filter(|&i| mask[i]) {
                        g[i] += y.data[i] * (gy[i] - dot) / temperature;
                    }
                });
            }
            Op::Transpose(x) => {
                let (n, m) = (y.shape[0], y.shape[1]);
                acc(*x, &mut |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gy[j * m + i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = (y.shape[0], y.shape[1]);
                let gam = &nodes[*gamma].value.data;
                acc(*beta, &mut |g| {
                    for r in gy.chunks(n) {
                        g.iter_mut().zip(r).for_each(|(a, d)| *a += d);
                    }
                });
                acc(*gamma, &mut |g| {
                    for k in 0..m * n {
                        g[k % n] += gy[k] * xhat[k];
                    }
                });
                acc(*x, &mut |g| {
                    let nf = n as f64;
                    for i in 0..m {
                        let row = i * n..(i + 1) * n;
                        let dxhat: Vec<f64> = row.clone().map(|k| gy[k] * gam[k % n]).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum();
                        for (j, k) in row.enumerate() {
                            g[k] += inv_std[i] / nf * (nf * dxhat[j] - sum_d - xhat[k] * sum_dx);
                        }
                    }
                });
            }
            Op::MeanRows(x) => {
                let m = nodes[*x].value.shape[0];
                let n = y.shape[1];
                acc(*x, &mut |g| {
                    for r in g.chunks_mut(n) {
                        r.iter_mut().zip(gy).for_each(|(a, d)| *a += d / m as f64);
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |g| g.iter_mut().for_each(|a| *a += gy[0]));
            }
            Op::Gather { table, indices } => {
                let n = y.shape[1];
                acc(*table, &mut |g| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..n {
                            g[i * n + j] += gy[r * n + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = nodes[*x].value.shape[1];
                let len = y.shape[1];
                acc(*x, &mut |g| {
                    for (r, gr) in gy.chunks(len).enumerate() {
                        for (j, d) in gr.iter().enumerate() {
                            g[r * n + start + j] += d;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (y.shape[0], y.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.shape[1];
                    acc(p, &mut |g| {
                        for i in 0..m {
                            for j in 0..w {
                                g[i * w + j] += gy[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    acc(p, &mut |g| {
                        g.iter_mut()
                            .zip(&gy[offset..offset + len])
                            .for_each(|(a, d)| *a += d);
                    });
                    offset += len;
                }
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + GELU_A * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let two = g.constant(Tensor::scalar(2.0));
        let three = g.constant(Tensor::scalar(3.0));
        let six = g.matmul(two, three).unwrap();
        assert_eq!(g.value(six).data(), &[6.0]);
    }

    #[test]
    fn matmul_hand_computed_2x2() {
        // [[1,2],[3,4]]·[[5,6],[7,8]]: 1·5+2·7=19, 1·6+2·8=22, 3·5+4·7=43, 3·6+4·8=50
        let mut g = Graph::new();
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(m(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0, 0.0]));
        let y = g.softmax(x, 1, 0.5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::row(&[2f64.ln(), 0.0]));
        let y = g.softmax(x, 1, 1.0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);

        // Scalar oracle for [10, 0, 0] at τ = 0.5: logits/τ = [20, 0, 0],
        // p0 = 1 / (1 + 2e^-20), p1 = p2 = e^-20 / (1 + 2e^-20).
        let e = (-20f64).exp();
        let p0 = 1.0 / (1.0 + 2.0 * e);
        let p1 = e / (1.0 + 2.0 * e);
        let x = g.constant(Tensor::row(&[10.0, 0.0, 0.0]));
        let y = g.softmax(x, 1, 0.5).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - p0).abs() < 1e-15);
        assert!((d[1] - p1).abs() < 1e-22);
        assert!((d[2] - p1).abs() < 1e-22);
    }

    #[test]
    fn softmax_axis0_normalizes_columns() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[1.0, 5.0], &[2.0, -3.0], &[0.5, 0.0]]));
        let y = g.softmax(x, 0, 2.0).unwrap();
        let v = g.value(y);
        for j in 0..2 {
            let s: f64 = (0..3).map(|i| v.get(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0]));
        assert!(matches!(g.softmax(x, 1, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn backward_product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.leaf(Tensor::scalar(5.0), true);
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[5.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        let first = g.grad(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        assert_eq!(g.grad(x).unwrap(), first);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let c = g.constant(Tensor::scalar(7.0));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn masked_softmax_zeroes_inactive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, 5.0, 2.0]));
        let y = g.masked_softmax(x, &[true, false, true], 0.5).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[1], 0.0);
        assert!((d[0] + d[2] - 1.0).abs() < 1e-15);
        assert!(g.masked_softmax(x, &[false; 3], 0.5).is_err());
    }

    #[test]
    fn gather_out_of_range() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.gather_rows(t, &[3]), Err(Error::Bounds { .. })));
    }

    #[test]
    #[should_panic(expected = "does not belong")]
    fn var_from_other_graph_panics() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.constant(Tensor::scalar(1.0));
        g2.exp(x);
    }
}
