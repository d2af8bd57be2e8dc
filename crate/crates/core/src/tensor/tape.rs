use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong adjoints, used to check that gradient checking catches them.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointFault {
    Gelu,
    Softmax,
    MatMul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    AddTime(Var, Var),
    Embed(Var, Vec<usize>),
    Sum(Var),
    Element(Var, usize),
    SmoothedNll {
        logits: Var,
        targets: Vec<usize>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-use record of a forward computation.
///
/// Nodes are appended in evaluation order, which is already a topological
/// order; `backward` walks them in exact reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    fault: Option<AdjointFault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: AdjointFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::contract("tape already consumed by backward"));
        }
        let mut value = value;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Records an input. Gradients are kept only if `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let flag = t.requires_grad();
        self.push(t.clone(), Op::Leaf, flag)
            .expect("leaf recorded on a consumed tape")
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
            .expect("constant recorded on a consumed tape")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims2(a)?;
        let (k2, c) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul {r}×{k} by {k2}×{c}: inner dimensions differ"
            )));
        }
        let out = kernels::matmul_raw(self.value(a).data(), self.value(b).data(), r, k, c);
        let rg = self.tracked(&[a, b]);
        self.push(Tensor::new(vec![r, c], out)?, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.dims2(a)?;
        let (c, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt {r}×{k} by ({c}×{k2})ᵀ: inner dimensions differ"
            )));
        }
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), r, k, c);
        let rg = self.tracked(&[a, b]);
        self.push(Tensor::new(vec![r, c], out)?, Op::MatMulNT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.tracked(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.tracked(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let vb = self.value(bias);
        if vb.numel() != c {
            return Err(Error::shape(format!(
                "row bias of {} values for {c} columns",
                vb.numel()
            )));
        }
        let bias_data = vb.data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bias_data) {
                *o += b;
            }
        }
        let rg = self.tracked(&[a, bias]);
        self.push(Tensor::new(vec![r, c], out)?, Op::AddRow(a, bias), rg)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let va = self.value(a);
        let out = va.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.tracked(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Multiplies by a recorded one-element tensor.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.numel() != 1 {
            return Err(Error::shape(format!(
                "scalar operand has shape {:?}",
                vs.shape()
            )));
        }
        let sv = vs.data()[0];
        let va = self.value(a);
        let out = va.data().iter().map(|x| x * sv).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.tracked(&[a, s]);
        self.push(t, Op::MulScalar(a, s), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "mul of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let out = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.tracked(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = va.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.tracked(&[a]);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = va.data().iter().map(|&x| kernels::gelu(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.tracked(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let out = kernels::softmax_rows(self.value(a).data(), r, c, causal);
        let rg = self.tracked(&[a]);
        self.push(Tensor::new(vec![r, c], out)?, Op::Softmax(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let (r, c) = self.dims2(x)?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(format!(
                "layer_norm over {c} columns with gamma {:?} and beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let res = kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            r,
            c,
            eps,
        );
        let t = Tensor::new(vec![r, c], res.out)?;
        let rg = self.tracked(&[x, gamma, beta]);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: res.xhat,
                rstd: res.rstd,
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let (_, c) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p)?;
            if pc != c {
                return Err(Error::shape(format!("concat_rows of widths {c} and {pc}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.tracked(parts);
        self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let (r, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p)?;
            if pr != r {
                return Err(Error::shape(format!("concat_cols of heights {r} and {pr}")));
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
        let rg = self.tracked(parts);
        self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if start >= end || end > r {
            return Err(Error::shape(format!(
                "row slice {start}..{end} of a {r}-row matrix"
            )));
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.tracked(&[a]);
        self.push(
            Tensor::new(vec![end - start, c], out)?,
            Op::SliceRows(a, start),
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.tracked(&[a]);
        self.push(t, Op::Reshape(a), rg)
    }

    /// `out[t, i, :] = f[t, i, :] + e[t, 0, :]`.
    pub fn add_time(&mut self, f: Var, e: Var) -> Result<Var> {
        let (vf, ve) = (self.value(f), self.value(e));
        let (t, n, d) = match vf.shape() {
            [t, n, d] => (*t, *n, *d),
            s => return Err(Error::shape(format!("features must be T×n×d, got {s:?}"))),
        };
        if ve.shape() != [t, 1, d] {
            return Err(Error::shape(format!(
                "time encodings {:?} for features {:?}",
                ve.shape(),
                vf.shape()
            )));
        }
        let mut out = vf.data().to_vec();
        let enc = ve.data();
        for ti in 0..t {
            let e_row = &enc[ti * d..(ti + 1) * d];
            for i in 0..n {
                let base = (ti * n + i) * d;
                for (o, x) in out[base..base + d].iter_mut().zip(e_row) {
                    *o += x;
                }
            }
        }
        let rg = self.tracked(&[f, e]);
        self.push(Tensor::new(vec![t, n, d], out)?, Op::AddTime(f, e), rg)
    }

    /// Gathers rows of an embedding table.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::shape("embedding lookup of zero ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::contract(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        let rg = self.tracked(&[table]);
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embed(table, ids.to_vec()),
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut total = 0.0;
        for &x in self.value(a).data() {
            total += x;
        }
        let rg = self.tracked(&[a]);
        self.push(Tensor::new(vec![1], vec![total])?, Op::Sum(a), rg)
    }

    /// One entry, by flat row-major index.
    pub fn element(&mut self, a: Var, flat: usize) -> Result<Var> {
        let va = self.value(a);
        if flat >= va.numel() {
            return Err(Error::shape(format!(
                "element {flat} of a {}-value tensor",
                va.numel()
            )));
        }
        let x = va.data()[flat];
        let rg = self.tracked(&[a]);
        self.push(Tensor::new(vec![1], vec![x])?, Op::Element(a, flat), rg)
    }

    /// Label-smoothed negative log-likelihood averaged over positions:
    /// `(1-ε)·(-log p[y]) + (ε/V)·Σ_v -log p[v]` with `p = softmax(logits)`.
    pub fn smoothed_nll(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::contract(format!(
                "label smoothing must lie in [0, 1), got {eps}"
            )));
        }
        let (s, v) = self.dims2(logits)?;
        if targets.len() != s {
            return Err(Error::shape(format!(
                "{} targets for {s} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::contract(format!(
                "target {bad} outside vocabulary of {v}"
            )));
        }
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let nls = kernels::neg_log_softmax(&data[i * v..(i + 1) * v]);
            let mut uniform = 0.0;
            for &x in &nls {
                uniform += x;
            }
            total += (1.0 - eps) * nls[y] + (eps / v as f64) * uniform;
        }
        let loss = total / s as f64;
        let rg = self.tracked(&[logits]);
        self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::SmoothedNll {
                logits,
                targets: targets.to_vec(),
                eps,
            },
            rg,
        )
    }

    /// Reverse sweep from a one-element `loss`. Allowed once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(id, &g, &mut grads)?;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a tracked leaf after `backward`; `None` for detached inputs.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        match self.nodes.get(v.0) {
            Some(node) if matches!(node.op, Op::Leaf) && node.requires_grad => {
                self.grads.get(v.0).and_then(|g| g.as_deref())
            }
            _ => None,
        }
    }

    /// Copies the gradient of `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.set_grad(g.to_vec()),
            None => {
                t.clear_grad();
                Ok(())
            }
        }
    }

    fn fault_factor(&self, fault: AdjointFault) -> f64 {
        if self.fault == Some(fault) {
            1.5
        } else {
            1.0
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut send = |v: Var, contribution: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contribution);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (r, k) = self.dims2(*a)?;
                let (_, c) = self.dims2(*b)?;
                let f = self.fault_factor(AdjointFault::MatMul);
                if self.requires_grad(*a) {
                    let mut da = kernels::matmul_nt(g, self.value(*b).data(), r, c, k);
                    if f != 1.0 {
                        da.iter_mut().for_each(|x| *x *= f);
                    }
                    send(*a, da);
                }
                if self.requires_grad(*b) {
                    send(*b, kernels::matmul_tn(self.value(*a).data(), g, r, k, c));
                }
            }
            Op::MatMulNT(a, b) => {
                let (r, k) = self.dims2(*a)?;
                let (c, _) = self.dims2(*b)?;
                if self.requires_grad(*a) {
                    send(*a, kernels::matmul_raw(g, self.value(*b).data(), r, c, k));
                }
                if self.requires_grad(*b) {
                    send(*b, kernels::matmul_tn(g, self.value(*a).data(), r, c, k));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a)?;
                send(*a, kernels::transpose(g, c, r));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddRow(a, bias) => {
                let (_, c) = self.dims2(*a)?;
                send(*a, g.to_vec());
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    send(*bias, db);
                }
            }
            Op::Scale(a, factor) => send(*a, g.iter().map(|x| x * factor).collect()),
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                if self.requires_grad(*a) {
                    send(*a, g.iter().map(|x| x * sv).collect());
                }
                if self.requires_grad(*s) {
                    let mut ds = 0.0;
                    for (x, y) in g.iter().zip(self.value(*a).data()) {
                        ds += x * y;
                    }
                    send(*s, vec![ds]);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    send(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if self.requires_grad(*b) {
                    send(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                send(
                    *a,
                    g.iter().zip(y).map(|(x, t)| x * (1.0 - t * t)).collect(),
                );
            }
            Op::Gelu(a) => {
                let f = self.fault_factor(AdjointFault::Gelu);
                let x = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| f * gv * kernels::gelu_derivative(xv))
                        .collect(),
                );
            }
            Op::Softmax(a) => {
                let (r, c) = self.dims2(*a)?;
                let f = self.fault_factor(AdjointFault::Softmax);
                let y = node.value.data();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let (gr, yr) = (&g[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]);
                    let mut dot = 0.0;
                    for (x, p) in gr.iter().zip(yr) {
                        dot += x * p;
                    }
                    for j in 0..c {
                        da[i * c + j] = f * yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = self.dims2(*x)?;
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dgamma[j] += g[i * c + j] * xhat[i * c + j];
                            dbeta[j] += g[i * c + j];
                        }
                    }
                    send(*gamma, dgamma);
                    send(*beta, dbeta);
                }
                if self.requires_grad(*x) {
                    let n = c as f64;
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let dh = g[i * c + j] * gam[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[i * c + j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..c {
                            let dh = g[i * c + j] * gam[j];
                            dx[i * c + j] = rstd[i] * (dh - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2()?;
                let mut col = 0;
                for &p in parts {
                    let (_, w) = self.dims2(p)?;
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        send(p, dp);
                    }
                    col += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (_, c) = self.dims2(*a)?;
                let mut da = vec![0.0; self.value(*a).numel()];
                da[start * c..start * c + g.len()].copy_from_slice(g);
                send(*a, da);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::AddTime(f, e) => {
                let (t, n, d) = match self.shape(*f) {
                    [t, n, d] => (*t, *n, *d),
                    _ => unreachable!("checked in forward"),
                };
                send(*f, g.to_vec());
                if self.requires_grad(*e) {
                    let mut de = vec![0.0; t * d];
                    for ti in 0..t {
                        for i in 0..n {
                            let base = (ti * n + i) * d;
                            for k in 0..d {
                                de[ti * d + k] += g[base + k];
                            }
                        }
                    }
                    send(*e, de);
                }
            }
            Op::Embed(table, ids) => {
                let (_, d) = self.dims2(*table)?;
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (row, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        dt[id * d + k] += g[row * d + k];
                    }
                }
                send(*table, dt);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Element(a, flat) => {
                let mut da = vec![0.0; self.value(*a).numel()];
                da[*flat] = g[0];
                send(*a, da);
            }
            Op::SmoothedNll {
                logits,
                targets,
                eps,
            } => {
                let (s, v) = self.dims2(*logits)?;
                let p = kernels::softmax_rows(self.value(*logits).data(), s, v, false);
                let w = g[0] / s as f64;
                let floor = eps / v as f64;
                let mut dl = vec![0.0; s * v];
                for (i, &y) in targets.iter().enumerate() {
                    for k in 0..v {
                        let target = if k == y { 1.0 - eps } else { 0.0 };
                        dl[i * v + k] = w * (p[i * v + k] - target - floor);
                    }
                }
                send(*logits, dl);
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}
