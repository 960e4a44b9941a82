//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. Nodes are appended in evaluation order, so walking the tape
//! backwards from the output is a valid reverse topological traversal.
//!
//! Broadcasting is limited to three patterns: identical shapes, a
//! single-element operand, and an operand matching either the trailing
//! dimensions of the other (a leading batch axis is broadcast) or its
//! leading dimensions padded with trailing ones (a per-row scalar).

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gradcore::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Full,
    /// index `i` reads `i % period`
    Tile(usize),
    /// index `i` reads `i / chunk`
    Repeat(usize),
    Scalar,
}

impl Bcast {
    #[inline]
    fn at(self, i: usize) -> usize {
        match self {
            Bcast::Full => i,
            Bcast::Tile(p) => i % p,
            Bcast::Repeat(c) => i / c,
            Bcast::Scalar => 0,
        }
    }
}

/// How `small` is read when expanded to `big`; `None` if unsupported.
fn expand_mode(big: &[usize], small: &[usize]) -> Option<Bcast> {
    if big == small {
        return Some(Bcast::Full);
    }
    let small_n: usize = small.iter().product();
    if small_n == 1 {
        return Some(Bcast::Scalar);
    }
    if small.len() < big.len() && big.ends_with(small) {
        return Some(Bcast::Tile(small_n));
    }
    // leading dims of `big` followed by ones
    let k = small.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
    if k > 0 && small.len() == big.len() && small[..k] == big[..k] {
        let chunk: usize = big[k..].iter().product();
        return Some(Bcast::Repeat(chunk));
    }
    None
}

fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast, Bcast)> {
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if an >= bn {
        let m = expand_mode(a, b).ok_or_else(mismatch)?;
        Ok((a.to_vec(), Bcast::Full, m))
    } else {
        let m = expand_mode(b, a).ok_or_else(mismatch)?;
        Ok((b.to_vec(), m, Bcast::Full))
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Gelu,
    Square,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        am: Bcast,
        bm: Bcast,
    },
    Unary {
        kind: UnKind,
        a: usize,
    },
    Scale {
        a: usize,
        c: f64,
    },
    Shift {
        a: usize,
    },
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    SumLast {
        a: usize,
        width: usize,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax {
        a: usize,
        width: usize,
    },
    Narrow {
        a: usize,
        start: usize,
        len: usize,
        width: usize,
    },
    ConcatLast {
        parts: Vec<(usize, usize)>,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    GatherRows {
        a: usize,
        idx: Arc<Vec<usize>>,
        row_len: usize,
    },
    Reshape {
        a: usize,
    },
    Expand {
        a: usize,
        mode: Bcast,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one reverse pass.
///
/// A tape is confined to the thread that created it; parameters and data
/// enter it as [`Tape::leaf`] or [`Tape::constant`] values.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    last_backward: Cell<Option<usize>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            last_backward: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        nodes.len() - 1
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Op::Leaf, true);
        self.var(id)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Op::Const, false);
        self.var(id)
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn owns(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::invalid("variable belongs to a different tape"))
        }
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = {
            let s = first.shape();
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            self.owns(p)?;
            let s = p.shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape(),
                    rhs: s,
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let src = nodes[p.id].value.data();
                for r in 0..rows {
                    out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                offset += w;
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let req = self.requires(&ids);
        let id = self.push(
            Tensor::new(&shape, out)?,
            Op::ConcatLast {
                parts: ids.into_iter().zip(widths).collect(),
            },
            req,
        );
        Ok(self.var(id))
    }

    /// Stacks along the leading axis.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        for p in parts {
            self.owns(p)?;
        }
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let out = Tensor::concat_rows(&values)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let req = self.requires(&ids);
        let id = self.push(out, Op::ConcatRows { parts: ids }, req);
        Ok(self.var(id))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: &Var<'_>) -> Result<Gradients> {
        self.owns(output)?;
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[output.id].value.shape()
            )));
        }
        if self.last_backward.get() == Some(nodes.len()) {
            return Err(Error::InvalidState(
                "backward already ran on this tape with no new operations recorded".into(),
            ));
        }
        self.last_backward.set(Some(nodes.len()));

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        grads[output.id] = Some(vec![1.0]);
        for i in (0..=output.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = nodes[..=output.id].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// `∂output/∂leaf` for each requested leaf; unreachable leaves get zeros.
    pub fn grad(&self, output: &Var<'_>, leaves: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let g = self.backward(output)?;
        leaves.iter().map(|l| Ok(g.get_or_zeros(l))).collect()
    }
}

/// Result of a reverse pass, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: &Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Tensor::new(&self.shapes[v.id], g.clone()).ok()
    }

    pub fn get_or_zeros(&self, v: &Var<'_>) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

fn accumulate<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller guarantees the strides stay inside `a`, `b` and `c`
    // for the given extents; every call site derives them from checked shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf | Op::Const => {}
        Op::Binary { kind, a, b, am, bm } => {
            let (a, b, am, bm) = (*a, *b, *am, *bm);
            let av = nodes[a].value.data();
            let bv = nodes[b].value.data();
            if let Some(ga) = accumulate(nodes, grads, a) {
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        BinKind::Add | BinKind::Sub => gi,
                        BinKind::Mul => gi * bv[bm.at(i)],
                        BinKind::Div => gi / bv[bm.at(i)],
                    };
                    ga[am.at(i)] += d;
                }
            }
            if let Some(gb) = accumulate(nodes, grads, b) {
                for (i, &gi) in g.iter().enumerate() {
                    let d = match kind {
                        BinKind::Add => gi,
                        BinKind::Sub => -gi,
                        BinKind::Mul => gi * av[am.at(i)],
                        BinKind::Div => {
                            let bb = bv[bm.at(i)];
                            -gi * av[am.at(i)] / (bb * bb)
                        }
                    };
                    gb[bm.at(i)] += d;
                }
            }
        }
        Op::Unary { kind, a } => {
            let x = nodes[*a].value.data();
            let y = node.value.data();
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for i in 0..g.len() {
                    ga[i] += match kind {
                        UnKind::Neg => -g[i],
                        UnKind::Exp => g[i] * y[i],
                        UnKind::Log => g[i] / x[i],
                        UnKind::Tanh => g[i] * (1.0 - y[i] * y[i]),
                        UnKind::Gelu => g[i] * gelu_parts(x[i]).1,
                        UnKind::Square => 2.0 * g[i] * x[i],
                        UnKind::Sqrt => g[i] / (2.0 * y[i]),
                    };
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }
        }
        Op::Shift { a } | Op::Reshape { a } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            let x = nodes[*a].value.data();
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for i in 0..g.len() {
                    if x[i] > *lo && x[i] < *hi {
                        ga[i] += g[i];
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean { a } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                let scale = g[0] / ga.len() as f64;
                for d in ga.iter_mut() {
                    *d += scale;
                }
            }
        }
        Op::SumLast { a, width } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for (i, d) in ga.iter_mut().enumerate() {
                    *d += g[i / width];
                }
            }
        }
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].requires_grad {
                let bv = nodes[*b].value.data();
                let ga = accumulate(nodes, grads, *a).unwrap();
                // dA = dC · Bᵀ
                gemm(m, n, k, g, n as isize, 1, bv, 1, n as isize, ga, 1.0);
            }
            if nodes[*b].requires_grad {
                let av = nodes[*a].value.data();
                let gb = accumulate(nodes, grads, *b).unwrap();
                // dB = Aᵀ · dC
                gemm(k, m, n, av, 1, k as isize, g, n as isize, 1, gb, 1.0);
            }
        }
        Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if nodes[*a].requires_grad {
                let ga = accumulate(nodes, grads, *a).unwrap();
                for p in 0..*batch {
                    let gc = &g[p * m * n..(p + 1) * m * n];
                    let bp = &bv[p * k * n..(p + 1) * k * n];
                    let dst = &mut ga[p * m * k..(p + 1) * m * k];
                    if *trans_b {
                        // C = A·Bᵀ with B stored [n,k]: dA = dC·B
                        gemm(m, n, k, gc, n as isize, 1, bp, k as isize, 1, dst, 1.0);
                    } else {
                        gemm(m, n, k, gc, n as isize, 1, bp, 1, n as isize, dst, 1.0);
                    }
                }
            }
            if nodes[*b].requires_grad {
                let gb = accumulate(nodes, grads, *b).unwrap();
                for p in 0..*batch {
                    let gc = &g[p * m * n..(p + 1) * m * n];
                    let ap = &av[p * m * k..(p + 1) * m * k];
                    let dst = &mut gb[p * k * n..(p + 1) * k * n];
                    if *trans_b {
                        // dB = dCᵀ·A, shape [n,k]
                        gemm(n, m, k, gc, 1, n as isize, ap, k as isize, 1, dst, 1.0);
                    } else {
                        gemm(k, m, n, ap, 1, k as isize, gc, n as isize, 1, dst, 1.0);
                    }
                }
            }
        }
        Op::Softmax { a, width } => {
            let y = node.value.data();
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for (r, yr) in y.chunks(*width).enumerate() {
                    let gr = &g[r * width..(r + 1) * width];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..*width {
                        ga[r * width + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Narrow { a, start, len, width } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                let rows = g.len() / len;
                for r in 0..rows {
                    for j in 0..*len {
                        ga[r * width + start + j] += g[r * len + j];
                    }
                }
            }
        }
        Op::ConcatLast { parts } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let rows = g.len() / total.max(1);
            let mut offset = 0;
            for &(p, w) in parts {
                if let Some(gp) = accumulate(nodes, grads, p) {
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows { parts } => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(gp) = accumulate(nodes, grads, p) {
                    for (d, &gi) in gp.iter_mut().zip(&g[offset..offset + n]) {
                        *d += gi;
                    }
                }
                offset += n;
            }
        }
        Op::GatherRows { a, idx, row_len } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..*row_len {
                        ga[src * row_len + j] += g[r * row_len + j];
                    }
                }
            }
        }
        Op::Expand { a, mode } => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    ga[mode.at(i)] += gi;
                }
            }
        }
    }
}

/// A tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    fn binary(&self, other: &Var<'t>, kind: BinKind, name: &'static str) -> Result<Var<'t>> {
        self.tape.owns(other)?;
        let (value, req) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (shape, am, bm) = broadcast_shapes(name, a.shape(), b.shape())?;
            let (ad, bd) = (a.data(), b.data());
            let n: usize = shape.iter().product();
            let f = |x: f64, y: f64| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
            let out: Vec<f64> = if am == Bcast::Full && bm == Bcast::Full {
                ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
            } else {
                (0..n).map(|i| f(ad[am.at(i)], bd[bm.at(i)])).collect()
            };
            let req = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            ((Tensor::new(&shape, out)?, am, bm), req)
        };
        let (value, am, bm) = value;
        let id = self.tape.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
                am,
                bm,
            },
            req,
        );
        Ok(self.tape.var(id))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Div, "div")
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        self.mul(&self.tape.constant(c.clone()))
    }

    /// Elementwise sum with a constant tensor.
    pub fn add_const(&self, c: &Tensor) -> Result<Var<'t>> {
        self.add(&self.tape.constant(c.clone()))
    }

    fn unary(&self, kind: UnKind) -> Var<'t> {
        let (value, req) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let v = x.map(|v| match kind {
                UnKind::Neg => -v,
                UnKind::Exp => v.exp(),
                UnKind::Log => v.ln(),
                UnKind::Tanh => v.tanh(),
                UnKind::Gelu => gelu_parts(v).0,
                UnKind::Square => v * v,
                UnKind::Sqrt => v.sqrt(),
            });
            (v, nodes[self.id].requires_grad)
        };
        let id = self.tape.push(value, Op::Unary { kind, a: self.id }, req);
        self.tape.var(id)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(UnKind::Neg)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(UnKind::Exp)
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(UnKind::Log)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(UnKind::Tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(UnKind::Gelu)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(UnKind::Square)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(UnKind::Sqrt)
    }

    fn with_op(&self, value: Tensor, op: Op) -> Var<'t> {
        let req = self.tape.nodes.borrow()[self.id].requires_grad;
        let id = self.tape.push(value, op, req);
        self.tape.var(id)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| c * x);
        self.with_op(v, Op::Scale { a: self.id, c })
    }

    /// Adds a constant scalar.
    pub fn shift(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.with_op(v, Op::Shift { a: self.id })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.with_op(v, Op::Clamp { a: self.id, lo, hi })
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.with_op(v, Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.with_op(v, Op::Mean { a: self.id })
    }

    /// Sums over the last axis, keeping it with extent one.
    pub fn sum_last(&self) -> Var<'t> {
        let x = self.value();
        let mut shape = x.shape().to_vec();
        let width = shape.pop().unwrap_or(1).max(1);
        shape.push(1);
        let out: Vec<f64> = x.data().chunks(width).map(|c| c.iter().sum()).collect();
        let v = Tensor::new(&shape, out).expect("sum_last shape");
        self.with_op(v, Op::SumLast { a: self.id, width })
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.tape.owns(other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut out, 0.0);
        let req = self.tape.requires(&[self.id, other.id]);
        let id = self.tape.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            req,
        );
        Ok(self.tape.var(id))
    }

    /// Batched product `[B,m,k] × [B,k,n]`, or `[B,m,k] × [B,n,k]ᵀ` when
    /// `trans_b` is set.
    pub fn bmm(&self, other: &Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.tape.owns(other)?;
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(mismatch());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(mismatch());
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        for p in 0..batch {
            let ap = &a.data()[p * m * k..(p + 1) * m * k];
            let bp = &b.data()[p * k * n..(p + 1) * k * n];
            let cp = &mut out[p * m * n..(p + 1) * m * n];
            if trans_b {
                gemm(m, k, n, ap, k as isize, 1, bp, 1, k as isize, cp, 0.0);
            } else {
                gemm(m, k, n, ap, k as isize, 1, bp, n as isize, 1, cp, 0.0);
            }
        }
        let req = self.tape.requires(&[self.id, other.id]);
        let id = self.tape.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            req,
        );
        Ok(self.tape.var(id))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        self.softmax_impl(None).expect("unmasked softmax")
    }

    /// Softmax over the last axis restricted to entries where `mask` is
    /// true. `mask` covers the trailing dimensions and is tiled over the
    /// leading ones. Fully masked rows produce zeros.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Var<'t>> {
        self.softmax_impl(Some(mask))
    }

    fn softmax_impl(&self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let x = self.value();
        let width = *x.shape().last().unwrap_or(&1);
        if let Some(m) = mask {
            if m.is_empty() || !m.len().is_multiple_of(width) || !x.numel().is_multiple_of(m.len()) {
                return Err(Error::invalid(format!(
                    "mask of length {} does not tile shape {:?}",
                    m.len(),
                    x.shape()
                )));
            }
        }
        let mut out = vec![0.0; x.numel()];
        for (r, row) in x.data().chunks(width).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[(r * width + j) % m.len()]);
            let max = (0..width)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..width {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    out[r * width + j] = e;
                    total += e;
                }
            }
            for v in &mut out[r * width..(r + 1) * width] {
                *v /= total;
            }
        }
        let v = Tensor::new(x.shape(), out)?;
        Ok(self.with_op(v, Op::Softmax { a: self.id, width }))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let width = *x.shape().last().unwrap_or(&1);
        if start + len > width {
            return Err(Error::invalid(format!(
                "narrow {start}..{} exceeds last extent {width}",
                start + len
            )));
        }
        let rows = x.numel() / width.max(1);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * width + start..r * width + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let v = Tensor::new(&shape, out)?;
        Ok(self.with_op(
            v,
            Op::Narrow {
                a: self.id,
                start,
                len,
                width,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.with_op(v, Op::Reshape { a: self.id }))
    }

    /// Selects rows of the leading axis; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let rows = x.rows();
        let row_len = x.row_len();
        let mut out = Vec::with_capacity(idx.len() * row_len);
        for &i in idx {
            if i >= rows {
                return Err(Error::invalid(format!("row {i} out of bounds ({rows})")));
            }
            out.extend_from_slice(x.row(i));
        }
        let mut shape = x.shape().to_vec();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.with_op(
            v,
            Op::GatherRows {
                a: self.id,
                idx: Arc::new(idx.to_vec()),
                row_len,
            },
        ))
    }

    /// Expands to `shape` under the supported broadcast patterns.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mode = expand_mode(shape, x.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: "broadcast_to",
            lhs: x.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let n: usize = shape.iter().product();
        let out = (0..n).map(|i| x.data()[mode.at(i)]).collect();
        let v = Tensor::new(shape, out)?;
        Ok(self.with_op(v, Op::Expand { a: self.id, mode }))
    }
}

/// Gradients of a scalar `output` with respect to `leaves`.
pub fn grad(output: &Var<'_>, leaves: &[Var<'_>]) -> Result<Vec<Tensor>> {
    output.tape.grad(output, leaves)
}
