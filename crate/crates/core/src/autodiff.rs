//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep that
//! visits each node once. Leaf and parameter gradients accumulate across
//! repeated `backward` calls until [`Graph::zero_grad`] is called.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// `sqrt(2 / pi)` for the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient for the tanh form of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation graph over a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected 2-D tensor, got {s:?}"))),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, false, "constant")
    }

    /// Differentiable input leaf; its gradient is readable via [`Graph::grad`].
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, true, "leaf")
    }

    /// The node for parameter `id`. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param,
            needs_grad: true,
        });
        self.grads.push(None);
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(a, b),
            ng,
            "matmul",
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(t, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a length-`c` bias to every row of an `r × c` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(u, v)| u + v))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        self.push(t, Op::AddRow(x, bias), ng, "add_row")
    }

    /// `x · w + b`, the affine map used by every linear layer.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng, "scale")
    }

    /// Row-wise softmax over the last axis, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = softmax_rows(self.value(x));
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng, "softmax_rows")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d == 0 || self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
            "layer_norm",
        )
    }

    /// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng, "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng, "sigmoid")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::abs);
        let ng = self.ng(x);
        self.push(t, Op::Abs(x), ng, "abs")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![c, r], out)?,
            Op::Transpose(x),
            ng,
            "transpose",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_cols")?;
        if start + len > c {
            return Err(shape_err("slice_cols", format!("{start}+{len} > {c}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![r, len], out)?,
            Op::SliceCols { x, start },
            ng,
            "slice_cols",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "slice_rows")?;
        if start + len > r {
            return Err(shape_err("slice_rows", format!("{start}+{len} > {r}")));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![len, c], out)?,
            Op::SliceRows { x, start },
            ng,
            "slice_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let (r, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = dims2(self.value(p), "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            ng,
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let (_, c) = dims2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = dims2(self.value(p), "concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", format!("col counts {c} vs {pc}")));
            }
            rows += pr;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            ng,
            "concat_rows",
        )
    }

    /// Rows of `x` at `idx`, in that order. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(x), "gather_rows")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::OutOfRange { index: i, len: r });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
            "gather_rows",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng, "mean")
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len().max(1) as f64;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(s), Op::Mse(a, b), ng, "mse")
    }

    /// Gradient accumulated so far on a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Adds the parameter gradients held by this graph into `out`.
    pub fn accumulate_param_grads(&self, out: &mut Gradients) {
        for (&id, &v) in &self.param_vars {
            if let Some(g) = &self.grads[v.0] {
                out.accumulate(id, g);
            }
        }
    }

    /// Reverse sweep from a scalar `loss`. Leaf and parameter gradients are
    /// added to whatever earlier calls left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let buf = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            };
            match &node.op {
                Op::Input | Op::Param => match &mut self.grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let nn = bv.shape()[1];
                    acc(*a, &mut |da| {
                        gemm(m, nn, k, &g, false, bv.data(), true, da, 1.0)
                    });
                    acc(*b, &mut |db| {
                        gemm(k, m, nn, av.data(), true, &g, false, db, 1.0)
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    acc(*a, &mut |d| {
                        for ((x, gy), bb) in d.iter_mut().zip(&g).zip(bv) {
                            *x += gy * bb;
                        }
                    });
                    acc(*b, &mut |d| {
                        for ((x, gy), aa) in d.iter_mut().zip(&g).zip(av) {
                            *x += gy * aa;
                        }
                    });
                }
                Op::AddRow(x, bias) => {
                    let c = nodes[bias.0].value.len();
                    acc(*x, &mut |d| add_into(d, &g));
                    acc(*bias, &mut |d| {
                        for row in g.chunks(c) {
                            add_into(d, row);
                        }
                    });
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(*x, &mut |d| {
                        d.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b)
                    });
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    acc(*x, &mut |d| {
                        for ((drow, grow), yrow) in
                            d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                drow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = nodes[gamma.0].value.len();
                    let gam = nodes[gamma.0].value.data();
                    acc(*x, &mut |dx| {
                        for (r, rs) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gam[j];
                                m1 += dh;
                                m2 += dh * hr[j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                let dh = gr[j] * gam[j];
                                dx[r * d + j] += rs * (dh - m1 - hr[j] * m2);
                            }
                        }
                    });
                    acc(*gamma, &mut |dg| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    acc(*beta, &mut |db| {
                        for gr in g.chunks(d) {
                            add_into(db, gr);
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(*x, &mut |d| {
                        for ((a, gy), &xx) in d.iter_mut().zip(&g).zip(xv) {
                            *a += gy * gelu_grad(xx);
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    acc(*x, &mut |d| {
                        for ((a, gy), s) in d.iter_mut().zip(&g).zip(y) {
                            *a += gy * s * (1.0 - s);
                        }
                    });
                }
                Op::Abs(x) => {
                    let xv = nodes[x.0].value.data();
                    acc(*x, &mut |d| {
                        for ((a, gy), &xx) in d.iter_mut().zip(&g).zip(xv) {
                            let s = if xx > 0.0 {
                                1.0
                            } else if xx < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *a += gy * s;
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                    acc(*x, &mut |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::SliceCols { x, start } => {
                    let c = nodes[x.0].value.cols();
                    let w = node.value.cols();
                    let start = *start;
                    acc(*x, &mut |d| {
                        for (i, grow) in g.chunks(w).enumerate() {
                            add_into(&mut d[i * c + start..i * c + start + w], grow);
                        }
                    });
                }
                Op::SliceRows { x, start } => {
                    let c = nodes[x.0].value.cols();
                    let off = start * c;
                    acc(*x, &mut |d| add_into(&mut d[off..off + g.len()], &g));
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        acc(*p, &mut |d| {
                            for (i, drow) in d.chunks_mut(w).enumerate() {
                                add_into(drow, &g[i * total + off..i * total + off + w]);
                            }
                        });
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        acc(*p, &mut |d| add_into(d, &g[off..off + len]));
                        off += len;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let c = nodes[x.0].value.cols();
                    acc(*x, &mut |d| {
                        for (k, &i) in idx.iter().enumerate() {
                            add_into(&mut d[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &mut |d| add_into(d, &g)),
                Op::Sum(x) => {
                    let s = g[0];
                    acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += s));
                }
                Op::Mean(x) => {
                    let s = g[0] / nodes[x.0].value.len().max(1) as f64;
                    acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += s));
                }
                Op::Mse(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    let s = 2.0 * g[0] / av.len().max(1) as f64;
                    acc(*a, &mut |d| {
                        for ((x, p), q) in d.iter_mut().zip(av).zip(bv) {
                            *x += s * (p - q);
                        }
                    });
                    acc(*b, &mut |d| {
                        for ((x, p), q) in d.iter_mut().zip(av).zip(bv) {
                            *x -= s * (p - q);
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise stabilized softmax of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c.max(1)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}
