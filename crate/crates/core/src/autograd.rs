//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] walks it in reverse. The graph is consumed by
//! `backward`; read any forward values you need before calling it.
//!
//! Storage is `f32`; reductions (sums, norms, softmax denominators, layer-norm
//! statistics, losses) accumulate in `f64`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Per-entry instruction for [`Graph::pin_to_row_extrema`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Pin {
    Keep = 0,
    RowMax = 1,
    RowMin = 2,
}

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    Silu(Var),
    SoftmaxRows(Var),
    Pin {
        x: Var,
        pins: Arc<Vec<Pin>>,
        argmax: Vec<usize>,
        argmin: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Sum(Var),
    Mean(Var),
    MseTo {
        x: Var,
        target: Arc<Vec<f32>>,
    },
    GaussianLogRatio {
        mean: Var,
        action: Arc<Vec<f32>>,
        inv_var: f64,
    },
    Exp(Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    Minimum(Var, Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Confined to one thread.
pub struct Graph {
    nodes: Vec<Node>,
    poisoned: Option<String>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f32>>>,
    params: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.by_node[v.0].as_deref()
    }

    /// `(slot, gradient)` for every parameter leaf reached by the loss.
    /// A slot bound more than once has its gradients summed.
    pub fn params(&self) -> BTreeMap<usize, Vec<f32>> {
        let mut out: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
        for &(slot, v) in &self.params {
            if let Some(g) = self.by_node[v.0].as_deref() {
                match out.get_mut(&slot) {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => {
                        out.insert(slot, g.to_vec());
                    }
                }
            }
        }
        out
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got shape {shape:?}");
    (shape[0], shape[1])
}

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

pub fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax of a `[rows, cols]` buffer, f64 denominators.
pub fn softmax_rows_into(x: &[f32], cols: usize, out: &mut [f32]) {
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            denom += e as f64;
        }
        let inv = (1.0 / denom) as f32;
        orow.iter_mut().for_each(|o| *o *= inv);
    }
}

/// Indices of the first maximum and first minimum of a row.
fn row_extrema(row: &[f32]) -> (usize, usize) {
    let mut imax = 0;
    let mut imin = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[imax] {
            imax = j;
        }
        if v < row[imin] {
            imin = j;
        }
    }
    (imax, imin)
}

/// Apply pin codes to a square matrix of logits, in place.
pub fn pin_rows_in_place(x: &mut [f32], cols: usize, pins: &[Pin]) {
    for (row, prow) in x.chunks_exact_mut(cols).zip(pins.chunks_exact(cols)) {
        if prow.iter().all(|&p| p == Pin::Keep) {
            continue;
        }
        let (imax, imin) = row_extrema(row);
        let (vmax, vmin) = (row[imax], row[imin]);
        for (v, &p) in row.iter_mut().zip(prow) {
            match p {
                Pin::Keep => {}
                Pin::RowMax => *v = vmax,
                Pin::RowMin => *v = vmin,
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            poisoned: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        if self.poisoned.is_none() && value.iter().any(|v| !v.is_finite()) {
            self.poisoned = Some(op_name(&op).to_string());
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Error if any recorded op produced a non-finite value.
    pub fn check_finite(&self) -> Result<()> {
        match &self.poisoned {
            Some(op) => Err(Error::numerical(op.clone())),
            None => Ok(()),
        }
    }

    /// Constant input; no gradient.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, false)
    }

    pub fn input_raw(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Var {
        self.push(shape, data, Op::Input, false)
    }

    /// Leaf whose gradient is tracked; `slot` identifies it in [`Gradients::params`].
    pub fn param(&mut self, slot: usize, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(slot), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push(vec![m, n], out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.shape(a));
        let out = transpose(self.value(a), m, n);
        let ng = self.ng(a);
        self.push(vec![n, m], out, Op::Transpose(a), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[m,n] + [n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = dims2(self.shape(a));
        assert_eq!(numel(self.shape(row)), n, "row broadcast length");
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(o, &b)| *o += b);
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(vec![m, n], out, Op::AddRow(a, row), ng)
    }

    /// `[m,n] * [n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = dims2(self.shape(a));
        assert_eq!(numel(self.shape(row)), n, "row broadcast length");
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_exact_mut(n) {
            chunk.iter_mut().zip(r).for_each(|(o, &b)| *o *= b);
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(vec![m, n], out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let ng = self.ng(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddScalar(a), ng)
    }

    /// Layer normalization over the last dim of a `[m,n]` matrix.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (m, n) = dims2(self.shape(x));
        assert_eq!(numel(self.shape(gain)), n);
        assert_eq!(numel(self.shape(bias)), n);
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = vec![0.0f32; m * n];
        let mut rstd = vec![0.0f32; m];
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r as f32;
            for j in 0..n {
                let h = ((row[j] as f64 - mean) * r) as f32;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Silu(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = dims2(self.shape(x));
        let mut out = vec![0.0; m * n];
        softmax_rows_into(self.value(x), n, &mut out);
        let ng = self.ng(x);
        self.push(vec![m, n], out, Op::SoftmaxRows(x), ng)
    }

    /// Replace entries marked [`Pin::RowMax`] / [`Pin::RowMin`] by the maximum /
    /// minimum of their row (taken over the unmodified row, all columns).
    pub fn pin_to_row_extrema(&mut self, x: Var, pins: Arc<Vec<Pin>>) -> Var {
        let (m, n) = dims2(self.shape(x));
        assert_eq!(pins.len(), m * n, "pin matrix shape");
        let mut out = self.value(x).to_vec();
        let mut argmax = vec![0; m];
        let mut argmin = vec![0; m];
        for i in 0..m {
            let (a, b) = row_extrema(&out[i * n..(i + 1) * n]);
            argmax[i] = a;
            argmin[i] = b;
        }
        pin_rows_in_place(&mut out, n, &pins);
        let ng = self.ng(x);
        self.push(
            vec![m, n],
            out,
            Op::Pin {
                x,
                pins,
                argmax,
                argmin,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = dims2(self.shape(x));
        assert!(start + len <= n);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        self.push(vec![m, len], out, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = dims2(self.shape(p));
                assert_eq!(r, m, "concat row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Var {
        assert_eq!(numel(&shape), index.len());
        let xv = self.value(x);
        let out = index.iter().map(|&i| xv[i]).collect();
        let ng = self.ng(x);
        self.push(shape, out, Op::Gather { x, index }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>();
        let ng = self.ng(x);
        self.push(vec![], vec![s as f32], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() / n;
        let ng = self.ng(x);
        self.push(vec![], vec![s as f32], Op::Mean(x), ng)
    }

    /// Mean squared difference between `x` and a constant target.
    pub fn mse_to(&mut self, x: Var, target: Arc<Vec<f32>>) -> Var {
        assert_eq!(self.value(x).len(), target.len());
        let n = target.len() as f64;
        let s = self
            .value(x)
            .iter()
            .zip(target.iter())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n;
        let ng = self.ng(x);
        self.push(vec![], vec![s as f32], Op::MseTo { x, target }, ng)
    }

    /// `log N(action; mean, std^2 I) - logp_ref`, evaluated in `f64`.
    pub fn gaussian_log_ratio(
        &mut self,
        mean: Var,
        action: Arc<Vec<f32>>,
        std: f64,
        logp_ref: f64,
    ) -> Var {
        assert_eq!(self.value(mean).len(), action.len());
        let lp = gaussian_logprob(&action, self.value(mean), std);
        let ng = self.ng(mean);
        self.push(
            vec![],
            vec![(lp - logp_ref) as f32],
            Op::GaussianLogRatio {
                mean,
                action,
                inv_var: 1.0 / (std * std),
            },
            ng,
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.exp()).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Exp(x), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let ng = self.ng(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, f32::min, Op::Minimum(a, b))
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(slot) = node.op {
                params.push((slot, Var(idx)));
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            // keep gradients of intermediate nodes available for inspection
            grads[idx] = Some(g);
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical(format!(
                        "backward through {}",
                        op_name(&self.nodes[i].op)
                    )));
                }
            }
        }
        params.reverse();
        Ok(Gradients {
            by_node: grads,
            params,
        })
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].shape);
                let n = node.shape[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |ga| {
                    let bt = transpose(bv, k, n);
                    matmul_acc(g, &bt, ga, m, n, k);
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            let dst = &mut gb[p * n..(p + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, &x)| *d += aip * x);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(&self.nodes[a.0].shape);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, &x)| *d -= x));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |ga| {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((d, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = node.shape[1];
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
                acc(*row, &mut |gr| {
                    let mut sums = vec![0.0f64; n];
                    for chunk in g.chunks_exact(n) {
                        sums.iter_mut().zip(chunk).for_each(|(s, &x)| *s += x as f64);
                    }
                    gr.iter_mut().zip(&sums).for_each(|(d, &s)| *d += s as f32);
                });
            }
            Op::MulRow(a, row) => {
                let n = node.shape[1];
                let av = &self.nodes[a.0].value;
                let rv = &self.nodes[row.0].value;
                acc(*a, &mut |ga| {
                    for (i, (d, &x)) in ga.iter_mut().zip(g).enumerate() {
                        *d += x * rv[i % n];
                    }
                });
                acc(*row, &mut |gr| {
                    let mut sums = vec![0.0f64; n];
                    for (gc, ac) in g.chunks_exact(n).zip(av.chunks_exact(n)) {
                        for ((s, &x), &y) in sums.iter_mut().zip(gc).zip(ac) {
                            *s += x as f64 * y as f64;
                        }
                    }
                    gr.iter_mut().zip(&sums).for_each(|(d, &s)| *d += s as f32);
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x * c));
            }
            Op::AddScalar(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = dims2(&node.shape);
                let gv = &self.nodes[gain.0].value;
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let mut mean_d = 0.0f64;
                        let mut mean_dh = 0.0f64;
                        for j in 0..n {
                            let d = (gr[j] * gv[j]) as f64;
                            mean_d += d;
                            mean_dh += d * hr[j] as f64;
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let r = rstd[i] as f64;
                        for j in 0..n {
                            let d = (gr[j] * gv[j]) as f64;
                            gx[i * n + j] += (r * (d - mean_d - hr[j] as f64 * mean_dh)) as f32;
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    let mut s = vec![0.0f64; n];
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            s[j] += (gr[j] * hr[j]) as f64;
                        }
                    }
                    gg.iter_mut().zip(&s).for_each(|(d, &v)| *d += v as f32);
                });
                acc(*bias, &mut |gb| {
                    let mut s = vec![0.0f64; n];
                    for gr in g.chunks_exact(n) {
                        s.iter_mut().zip(gr).for_each(|(a, &v)| *a += v as f64);
                    }
                    gb.iter_mut().zip(&s).for_each(|(d, &v)| *d += v as f32);
                });
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((d, &gg), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += gg * gelu_grad(v);
                    }
                });
            }
            Op::Silu(x) => {
                let xv = &self.nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((d, &gg), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *d += gg * (s + v * s * (1.0 - s));
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = node.shape[1];
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for ((gr, yr), dr) in g
                        .chunks_exact(n)
                        .zip(y.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                    {
                        let dot = gr
                            .iter()
                            .zip(yr)
                            .map(|(&a, &b)| (a * b) as f64)
                            .sum::<f64>() as f32;
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Pin {
                x,
                pins,
                argmax,
                argmin,
            } => {
                let n = node.shape[1];
                acc(*x, &mut |gx| {
                    for (i, (gr, pr)) in g.chunks_exact(n).zip(pins.chunks_exact(n)).enumerate() {
                        let base = i * n;
                        for j in 0..n {
                            let dst = match pr[j] {
                                Pin::Keep => j,
                                Pin::RowMax => argmax[i],
                                Pin::RowMin => argmin[i],
                            };
                            gx[base + dst] += gr[j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims2(&self.nodes[x.0].shape);
                let len = node.shape[1];
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        let dst = &mut gx[i * n + start..i * n + start + len];
                        dst.iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(d, &v)| *d += v);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    acc(p, &mut |gp| {
                        for i in 0..m {
                            let src = &g[i * total + offset..i * total + offset + w];
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &v)| *d += v);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { x, index } => {
                acc(*x, &mut |gx| {
                    for (&i, &v) in index.iter().zip(g) {
                        gx[i] += v;
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += s));
            }
            Op::Mean(x) => {
                let s = g[0] / self.nodes[x.0].value.len() as f32;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|d| *d += s));
            }
            Op::MseTo { x, target } => {
                let xv = &self.nodes[x.0].value;
                let c = (2.0 * g[0] as f64 / target.len() as f64) as f32;
                acc(*x, &mut |gx| {
                    for ((d, &a), &b) in gx.iter_mut().zip(xv).zip(target.iter()) {
                        *d += c * (a - b);
                    }
                });
            }
            Op::GaussianLogRatio {
                mean,
                action,
                inv_var,
            } => {
                let mv = &self.nodes[mean.0].value;
                let c = g[0] as f64 * inv_var;
                acc(*mean, &mut |gm| {
                    for ((d, &m), &a) in gm.iter_mut().zip(mv).zip(action.iter()) {
                        *d += (c * (a as f64 - m as f64)) as f32;
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for ((d, &gg), &v) in gx.iter_mut().zip(g).zip(y) {
                        *d += gg * v;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.nodes[x.0].value;
                acc(*x, &mut |gx| {
                    for ((d, &gg), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > *lo && v < *hi {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Minimum(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                acc(*a, &mut |ga| {
                    for (((d, &gg), &x), &y) in ga.iter_mut().zip(g).zip(av).zip(bv) {
                        if x <= y {
                            *d += gg;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (((d, &gg), &x), &y) in gb.iter_mut().zip(g).zip(av).zip(bv) {
                        if y < x {
                            *d += gg;
                        }
                    }
                });
            }
        }
    }
}

/// Isotropic Gaussian log-density, accumulated in `f64`.
pub fn gaussian_logprob(action: &[f32], mean: &[f32], std: f64) -> f64 {
    let sq: f64 = action
        .iter()
        .zip(mean)
        .map(|(&a, &m)| (a as f64 - m as f64).powi(2))
        .sum();
    let d = action.len() as f64;
    -sq / (2.0 * std * std) - 0.5 * d * (2.0 * std::f64::consts::PI * std * std).ln()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::Silu(_) => "silu",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::Pin { .. } => "pin_to_row_extrema",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::Gather { .. } => "gather",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::MseTo { .. } => "mse",
        Op::GaussianLogRatio { .. } => "gaussian_log_ratio",
        Op::Exp(_) => "exp",
        Op::Clamp { .. } => "clamp",
        Op::Minimum(..) => "minimum",
    }
}

/// Row-wise softmax of a `[n, m]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "softmax_rows expects a matrix, got {:?}",
            logits.shape()
        )));
    }
    let cols = logits.shape()[1];
    let mut out = vec![0.0; logits.len()];
    softmax_rows_into(logits.data(), cols, &mut out);
    Tensor::from_vec(logits.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_sample, RngStream};

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// max |a-b| / max(max |a|, max |b|): normwise relative error.
    fn rel_err(a: &[f32], b: &[f64]) -> f64 {
        let diff = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y).abs())
            .fold(0.0, f64::max);
        let scale = a
            .iter()
            .map(|&x| (x as f64).abs())
            .chain(b.iter().map(|y| y.abs()))
            .fold(1e-12, f64::max);
        diff / scale
    }

    /// Central finite differences of a scalar function of one tensor.
    fn finite_diff(x: &Tensor, h: f32, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h as f64)
            })
            .collect()
    }

    fn check_unary(x: Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) {
        let f = |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.param(0, x);
            let out = build(&mut g, v);
            g.scalar(out) as f64
        };
        let mut g = Graph::new();
        let v = g.param(0, &x);
        let out = build(&mut g, v);
        let grads = g.backward(out).unwrap();
        let analytic = grads.wrt(v).unwrap().to_vec();
        let numeric = finite_diff(&x, 1e-3, &f);
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-3, "relative error {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(0, &Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(0, &t(&[1, 4], &[0.3, -1.0, 2.0, 0.7]));
        let s = g.softmax_rows(x);
        let total = g.sum(s);
        let grads = g.backward(total).unwrap();
        for &v in grads.wrt(x).unwrap() {
            assert!(v.abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let c = 1.7f32;
        let s = softmax_rows(&t(&[1, 2], &[c, c + 3f32.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6 && (s.data()[1] - 0.75).abs() < 1e-6);
        let s = softmax_rows(&t(&[1, 4], &[0.0, 20.0, 0.0, 0.0])).unwrap();
        assert!(s.data()[1] > 0.999);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(0, &t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut g = Graph::new();
        let x = g.param(0, &t(&[1], &[100.0]));
        let e = g.exp(x);
        let e2 = g.exp(e);
        assert!(matches!(g.backward(e2), Err(Error::Numerical { .. })));
    }

    #[test]
    fn elementwise_op_gradients() {
        let mut s = RngStream::new(1, 1);
        let x = gaussian_sample(&[3, 4], &mut s);
        check_unary(x.clone(), &|g, v| {
            let y = g.gelu(v);
            let z = g.mul(y, v);
            g.sum(z)
        });
        check_unary(x.clone(), &|g, v| {
            let y = g.silu(v);
            let w = g.scale(y, 0.7);
            g.mean(w)
        });
        check_unary(x.clone(), &|g, v| {
            let y = g.exp(v);
            let c = g.clamp(y, 0.5, 1.5);
            let m = g.minimum(c, v);
            g.sum(m)
        });
        check_unary(x, &|g, v| {
            let tgt = Arc::new((0..12).map(|i| i as f32 * 0.1).collect());
            g.mse_to(v, tgt)
        });
    }

    #[test]
    fn matrix_op_gradients() {
        let mut s = RngStream::new(2, 1);
        let w = gaussian_sample(&[4, 5], &mut s);
        let x = gaussian_sample(&[3, 4], &mut s);
        let gain = gaussian_sample(&[5], &mut s);
        let bias = gaussian_sample(&[5], &mut s);
        let probe = gaussian_sample(&[3, 5], &mut s);
        check_unary(x.clone(), &|g, v| {
            let wv = g.input(&w);
            let y = g.matmul(v, wv);
            let gv = g.input(&gain);
            let bv = g.input(&bias);
            let ln = g.layer_norm(y, gv, bv, 1e-5);
            let p = g.input(&probe);
            let z = g.mul(ln, p);
            g.sum(z)
        });
        check_unary(w.clone(), &|g, v| {
            let xv = g.input(&x);
            let y = g.matmul(xv, v);
            let yt = g.transpose(y);
            let sq = g.matmul(y, yt);
            let sm = g.softmax_rows(sq);
            let p = g.input(&probe);
            let pt = g.transpose(p);
            let z = g.matmul(sm, p);
            let z2 = g.matmul(z, pt);
            g.mean(z2)
        });
        check_unary(gain, &|g, v| {
            let xv = g.input(&x);
            let wv = g.input(&w);
            let y = g.matmul(xv, wv);
            let bv = g.input(&bias);
            let ln = g.layer_norm(y, v, bv, 1e-5);
            let p = g.input(&probe);
            let z = g.mul(ln, p);
            g.sum(z)
        });
        check_unary(probe.clone(), &|g, v| {
            let row = g.slice_cols(v, 0, 5);
            let first = g.gather(row, Arc::new(vec![0, 1, 2, 3, 4]), vec![5]);
            let m = g.mul_row(v, first);
            let s = g.gelu(m);
            g.sum(s)
        });
        check_unary(probe.clone(), &|g, v| {
            let a = g.slice_cols(v, 1, 2);
            let b = g.slice_cols(v, 0, 3);
            let c = g.concat_cols(&[b, a]);
            let idx = Arc::new(vec![4, 0, 9, 14, 2, 2]);
            let gth = g.gather(c, idx, vec![6]);
            let e = g.exp(gth);
            g.sum(e)
        });
        check_unary(bias, &|g, v| {
            let p = g.input(&probe);
            let r = g.add_row(p, v);
            let r = g.mul_row(r, v);
            let s = g.silu(r);
            let k = g.add_scalar(s, 0.3);
            let q = g.sub(k, p);
            let q2 = g.mul(q, q);
            g.sum(q2)
        });
    }

    #[test]
    fn pinned_logit_gradients() {
        let mut s = RngStream::new(3, 1);
        let x = gaussian_sample(&[4, 4], &mut s);
        let probe = gaussian_sample(&[4, 4], &mut s);
        let pins = Arc::new(
            [0u8, 1, 2, 0, 1, 0, 0, 2, 0, 0, 0, 0, 2, 1, 1, 0]
                .iter()
                .map(|&c| match c {
                    1 => Pin::RowMax,
                    2 => Pin::RowMin,
                    _ => Pin::Keep,
                })
                .collect::<Vec<_>>(),
        );
        check_unary(x, &|g, v| {
            let pinned = g.pin_to_row_extrema(v, pins.clone());
            let sm = g.softmax_rows(pinned);
            let p = g.input(&probe);
            let z = g.mul(sm, p);
            g.sum(z)
        });
    }

    #[test]
    fn gaussian_log_ratio_gradient() {
        let mut s = RngStream::new(4, 1);
        let mean = gaussian_sample(&[6], &mut s);
        let action = Arc::new(gaussian_sample(&[6], &mut s).into_data());
        check_unary(mean, &|g, v| {
            let lr = g.gaussian_log_ratio(v, action.clone(), 0.7, -3.0);
            let c = g.scale(lr, 0.1);
            g.exp(c)
        });
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut s = RngStream::new(5, 1);
        let x = gaussian_sample(&[5, 6], &mut s);
        let w1 = gaussian_sample(&[6, 8], &mut s);
        let b1 = gaussian_sample(&[8], &mut s);
        let w2 = gaussian_sample(&[8, 3], &mut s);
        let target = Arc::new(gaussian_sample(&[5, 3], &mut s).into_data());
        let params = [w1, b1, w2];
        let loss = |g: &mut Graph, p: &[Var]| {
            let xv = g.input(&x);
            let h = g.matmul(xv, p[0]);
            let h = g.add_row(h, p[1]);
            let h = g.gelu(h);
            let y = g.matmul(h, p[2]);
            g.mse_to(y, target.clone())
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
        let l = loss(&mut g, &vars);
        let grads = g.backward(l).unwrap().params();
        for (slot, p) in params.iter().enumerate() {
            let numeric = finite_diff(p, 1e-3, &|pert: &Tensor| {
                let mut g = Graph::new();
                let vars: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(i, q)| g.param(i, if i == slot { pert } else { q }))
                    .collect();
                let l = loss(&mut g, &vars);
                g.scalar(l) as f64
            });
            let err = rel_err(&grads[&slot], &numeric);
            assert!(err < 1e-3, "slot {slot}: {err}");
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let mut s = RngStream::new(6, 1);
        let a = gaussian_sample(&[7, 5], &mut s);
        let b = gaussian_sample(&[5, 3], &mut s);
        let mut c = vec![0.0; 21];
        matmul_acc(a.data(), b.data(), &mut c, 7, 5, 3);
        for i in 0..7 {
            for j in 0..3 {
                let want: f64 = (0..5)
                    .map(|p| a.data()[i * 5 + p] as f64 * b.data()[p * 3 + j] as f64)
                    .sum();
                assert!((c[i * 3 + j] as f64 - want).abs() < 1e-5);
            }
        }
    }
}
