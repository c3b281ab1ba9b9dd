//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the record is topologically
//! sorted by construction. `backward` walks it once from the loss node down,
//! skipping nodes that no gradient-requiring leaf feeds into.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::fmt;

use super::kernels::{self, dot};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Sum(usize),
    Mean(usize),
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    ClampUnit(usize),
    RowCosine {
        z: usize,
        v: usize,
        eps: T,
        z_norms: Vec<T>,
        v_norm: T,
    },
    ScaleRows {
        x: usize,
        s: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: usize,
        label: usize,
        probs: Vec<T>,
    },
    Mse(usize, usize),
    MeanRows(usize),
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatRows(usize, usize),
    Reshape(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::ClampUnit(..) => "relu_clamp01",
            Op::RowCosine { .. } => "cosine_sim",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::MeanRows(..) => "mean_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Single-threaded operation record. Create one per forward pass (or per
/// worker); leaf gradients accumulate across `backward` calls until
/// [`Tape::zero_grad`].
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<BTreeMap<usize, Vec<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

impl<T: Scalar> Tape<T> {
    /// Non-finite checking is on in debug builds.
    pub fn new() -> Self {
        Self::with_finite_check(cfg!(debug_assertions))
    }

    pub fn with_finite_check(check_finite: bool) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(BTreeMap::new()),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies `t` onto the tape; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), true)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push_leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Var<'_, T>> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "constant",
                format!("{shape:?} vs {}", data.len()),
            ));
        }
        Ok(self.push_leaf(shape, data, false))
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var<'_, T>> {
        if self.check_finite && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.leaf_grads.borrow().get(&v.id).cloned()?;
        let shape = self.nodes()[v.id].shape.clone();
        Tensor::new(shape, g).ok()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    fn backward_from(&self, loss: usize) -> Result<()> {
        let nodes = self.nodes();
        if nodes[loss].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, got shape {:?}", nodes[loss].shape),
            ));
        }
        if self.check_finite && !nodes[loss].value[0].is_finite() {
            return Err(Error::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(vec![T::one()]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let needs = |i: usize| nodes[i].needs_grad;
            let val = |i: usize| nodes[i].value.as_slice();
            let mut send = |i: usize, contrib: Vec<T>| accumulate(&mut grads[i], contrib);

            match &node.op {
                Op::Leaf => match leaf_grads.get_mut(&id) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                    let n = nodes[*b].shape[1];
                    if needs(*a) {
                        let mut da = vec![T::zero(); m * k];
                        kernels::matmul_nt(&g, val(*b), &mut da, m, n, k);
                        send(*a, da);
                    }
                    if needs(*b) {
                        let mut db = vec![T::zero(); k * n];
                        kernels::matmul_tn(val(*a), &g, &mut db, m, k, n);
                        send(*b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (i_dim, o_dim) = (nodes[*w].shape[0], nodes[*w].shape[1]);
                    let r = nodes[*x].value.len() / i_dim;
                    if needs(*x) {
                        let mut dx = vec![T::zero(); r * i_dim];
                        kernels::matmul_nt(&g, val(*w), &mut dx, r, o_dim, i_dim);
                        send(*x, dx);
                    }
                    if needs(*w) {
                        let mut dw = vec![T::zero(); i_dim * o_dim];
                        kernels::matmul_tn(val(*x), &g, &mut dw, r, i_dim, o_dim);
                        send(*w, dw);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            let mut db = vec![T::zero(); o_dim];
                            for row in g.chunks(o_dim) {
                                add_into(&mut db, row);
                            }
                            send(*b, db);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        send(*a, g.clone());
                    }
                    if needs(*b) {
                        send(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        send(*a, g.clone());
                    }
                    if needs(*b) {
                        send(*b, g.iter().map(|&v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        send(*a, g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect());
                    }
                    if needs(*b) {
                        send(*b, g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect());
                    }
                }
                Op::Scale(a, c) => {
                    send(*a, g.iter().map(|&d| d * *c).collect());
                }
                Op::Sum(a) => {
                    send(*a, vec![g[0]; nodes[*a].value.len()]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len();
                    send(*a, vec![g[0] / T::of(n as f64); n]);
                }
                Op::Softmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let y = &node.value;
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..*outer {
                        for c in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + c;
                            let mut s = T::zero();
                            for j in 0..*len {
                                s = s + g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..*len {
                                dx[idx(j)] = y[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                    send(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = nodes[*gain].value.len();
                    let gv = val(*gain);
                    if needs(*x) {
                        let mut dx = vec![T::zero(); xhat.len()];
                        let inv_d = T::of(1.0 / d as f64);
                        for (r, ((gr, xr), dxr)) in g
                            .chunks(d)
                            .zip(xhat.chunks(d))
                            .zip(dx.chunks_mut(d))
                            .enumerate()
                        {
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..d {
                                let dh = gr[j] * gv[j];
                                m1 = m1 + dh;
                                m2 = m2 + dh * xr[j];
                            }
                            m1 = m1 * inv_d;
                            m2 = m2 * inv_d;
                            for j in 0..d {
                                dxr[j] = rstd[r] * (gr[j] * gv[j] - m1 - xr[j] * m2);
                            }
                        }
                        send(*x, dx);
                    }
                    if needs(*gain) {
                        let mut dg = vec![T::zero(); d];
                        for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] = dg[j] + gr[j] * xr[j];
                            }
                        }
                        send(*gain, dg);
                    }
                    if needs(*bias) {
                        let mut db = vec![T::zero(); d];
                        for gr in g.chunks(d) {
                            add_into(&mut db, gr);
                        }
                        send(*bias, db);
                    }
                }
                Op::Gelu(a) => {
                    let dx = g
                        .iter()
                        .zip(val(*a))
                        .map(|(&d, &x)| d * gelu_grad(x))
                        .collect();
                    send(*a, dx);
                }
                Op::ClampUnit(a) => {
                    let dx = g
                        .iter()
                        .zip(val(*a))
                        .map(|(&d, &x)| {
                            if x > T::zero() && x < T::one() {
                                d
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    send(*a, dx);
                }
                Op::RowCosine {
                    z,
                    v,
                    eps,
                    z_norms,
                    v_norm,
                } => {
                    let dim = nodes[*v].value.len();
                    let (zv, vv) = (val(*z), val(*v));
                    let cos = &node.value;
                    let nb = v_norm.max(*eps);
                    let mut dz = vec![T::zero(); zv.len()];
                    let mut dv = vec![T::zero(); dim];
                    for (r, zr) in zv.chunks(dim).enumerate() {
                        let na = z_norms[r].max(*eps);
                        let c = cos[r];
                        let gr = g[r];
                        let inv = T::one() / (na * nb);
                        let a_active = z_norms[r] > *eps;
                        let b_active = *v_norm > *eps;
                        for j in 0..dim {
                            let mut da = vv[j] * inv;
                            if a_active {
                                da = da - c * zr[j] / (na * na);
                            }
                            dz[r * dim + j] = gr * da;
                            let mut db = zr[j] * inv;
                            if b_active {
                                db = db - c * vv[j] / (nb * nb);
                            }
                            dv[j] = dv[j] + gr * db;
                        }
                    }
                    if needs(*z) {
                        send(*z, dz);
                    }
                    if needs(*v) {
                        send(*v, dv);
                    }
                }
                Op::ScaleRows { x, s } => {
                    let xv = val(*x);
                    let sv = val(*s);
                    let d = xv.len() / sv.len();
                    if needs(*x) {
                        let mut dx = vec![T::zero(); xv.len()];
                        for (r, (dxr, gr)) in dx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                            for (o, &gi) in dxr.iter_mut().zip(gr) {
                                *o = gi * sv[r];
                            }
                        }
                        send(*x, dx);
                    }
                    if needs(*s) {
                        let ds = g
                            .chunks(d)
                            .zip(xv.chunks(d))
                            .map(|(gr, xr)| dot(gr, xr))
                            .collect();
                        send(*s, ds);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        val(*q),
                        val(*k),
                        val(*v),
                        probs,
                        &g,
                        &nodes[*q].shape,
                        *heads,
                    );
                    if needs(*q) {
                        send(*q, dq);
                    }
                    if needs(*k) {
                        send(*k, dk);
                    }
                    if needs(*v) {
                        send(*v, dv);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let mut dl: Vec<T> = probs.iter().map(|&p| p * g[0]).collect();
                    dl[*label] = dl[*label] - g[0];
                    send(*logits, dl);
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let scale = T::of(2.0 / av.len() as f64) * g[0];
                    let diff: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| (x - y) * scale).collect();
                    if needs(*b) {
                        send(*b, diff.iter().map(|&v| -v).collect());
                    }
                    if needs(*a) {
                        send(*a, diff);
                    }
                }
                Op::MeanRows(a) => {
                    let d = g.len();
                    let n = nodes[*a].value.len() / d;
                    let inv = T::of(1.0 / n as f64);
                    let row: Vec<T> = g.iter().map(|&v| v * inv).collect();
                    let mut dx = Vec::with_capacity(n * d);
                    for _ in 0..n {
                        dx.extend_from_slice(&row);
                    }
                    send(*a, dx);
                }
                Op::SliceRows { x, start } => {
                    let total = nodes[*x].value.len();
                    let d = *nodes[*x].shape.last().unwrap_or(&1);
                    let mut dx = vec![T::zero(); total];
                    dx[start * d..start * d + g.len()].copy_from_slice(&g);
                    send(*x, dx);
                }
                Op::ConcatRows(a, b) => {
                    let na = nodes[*a].value.len();
                    if needs(*a) {
                        send(*a, g[..na].to_vec());
                    }
                    if needs(*b) {
                        send(*b, g[na..].to_vec());
                    }
                }
                Op::Reshape(a) => send(*a, g),
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => add_into(acc, &contrib),
        None => *slot = Some(contrib),
    }
}

fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a = *a + b;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let qi = &q[i * d + off..i * d + off + dh];
            let p_row = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let mut max = T::neg_infinity();
            for j in 0..n {
                let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                p_row[j] = s;
                max = max.max(s);
            }
            let mut z = T::zero();
            for p in p_row.iter_mut() {
                *p = (*p - max).exp();
                z = z + *p;
            }
            for p in p_row.iter_mut() {
                *p = *p / z;
            }
            let o = &mut out[i * d + off..i * d + off + dh];
            for (j, &p) in p_row.iter().enumerate() {
                let vj = &v[j * d + off..j * d + off + dh];
                for (oc, &vc) in o.iter_mut().zip(vj) {
                    *oc = *oc + p * vc;
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    shape: &[usize],
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, d) = (shape[0], shape[1]);
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut ds = vec![T::zero(); n];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..n {
            let p_row = &probs[(h * n + i) * n..(h * n + i + 1) * n];
            let gi = &g[i * d + off..i * d + off + dh];
            let mut weighted = T::zero();
            for j in 0..n {
                let dp = dot(gi, &v[j * d + off..j * d + off + dh]);
                ds[j] = dp;
                weighted = weighted + dp * p_row[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (o, &gc) in dvj.iter_mut().zip(gi) {
                    *o = *o + p_row[j] * gc;
                }
            }
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..n {
                let dsij = p_row[j] * (ds[j] - weighted) * scale;
                if dsij == T::zero() {
                    continue;
                }
                let kj = &k[j * d + off..j * d + off + dh];
                let dqi = &mut dq[i * d + off..i * d + off + dh];
                for (o, &kc) in dqi.iter_mut().zip(kj) {
                    *o = *o + dsij * kc;
                }
                let dkj = &mut dk[j * d + off..j * d + off + dh];
                for (o, &qc) in dkj.iter_mut().zip(qi) {
                    *o = *o + dsij * qc;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].needs_grad
    }

    pub fn value(&self) -> Tensor<T> {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// First element; the value of a scalar node.
    pub fn item(&self) -> T {
        self.tape.nodes()[self.id].value[0]
    }

    /// Populates leaf gradients of this scalar. Accumulates across calls.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    fn unary(
        &self,
        f: impl FnOnce(&[usize], &[T]) -> Result<(Vec<usize>, Vec<T>)>,
        make: impl FnOnce() -> Op<T>,
    ) -> Result<Var<'t, T>> {
        let (shape, value, needs) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let (shape, value) = f(&n.shape, &n.value)?;
            (shape, value, n.needs_grad)
        };
        self.tape.push(shape, value, make(), needs)
    }

    fn same_tape(&self, other: &Var<'t, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::dim(op, "operands live on different tapes"))
        }
    }

    pub fn matmul(&self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&b, "matmul")?;
        let (shape, value, needs) = {
            let nodes = self.tape.nodes();
            let (na, nb) = (&nodes[self.id], &nodes[b.id]);
            let ([m, k], [k2, n]) = (na.shape.as_slice(), nb.shape.as_slice()) else {
                return Err(Error::dim(
                    "matmul",
                    format!("expected matrices, got {:?} x {:?}", na.shape, nb.shape),
                ));
            };
            if k != k2 {
                return Err(Error::dim(
                    "matmul",
                    format!("inner dimensions differ: {:?} x {:?}", na.shape, nb.shape),
                ));
            }
            let mut out = vec![T::zero(); m * n];
            kernels::matmul(&na.value, &nb.value, &mut out, *m, *k, *n);
            (vec![*m, *n], out, na.needs_grad || nb.needs_grad)
        };
        self.tape
            .push(shape, value, Op::MatMul(self.id, b.id), needs)
    }

    /// `self · w + b` over the last axis of `self`; `w` is `[in × out]`.
    pub fn linear(&self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(&w, "linear")?;
        let (shape, value, needs) = {
            let nodes = self.tape.nodes();
            let (nx, nw) = (&nodes[self.id], &nodes[w.id]);
            let [i_dim, o_dim] = nw.shape.as_slice() else {
                return Err(Error::dim("linear", format!("weight shape {:?}", nw.shape)));
            };
            let in_dim = *nx.shape.last().unwrap_or(&1);
            if in_dim != *i_dim || nx.shape.is_empty() {
                return Err(Error::dim(
                    "linear",
                    format!("input {:?} vs weight {:?}", nx.shape, nw.shape),
                ));
            }
            let r = nx.value.len() / i_dim;
            let mut out = vec![T::zero(); r * o_dim];
            let mut needs = nx.needs_grad || nw.needs_grad;
            if let Some(b) = b {
                let nb = &nodes[b.id];
                if nb.value.len() != *o_dim {
                    return Err(Error::dim("linear", format!("bias shape {:?}", nb.shape)));
                }
                for row in out.chunks_mut(*o_dim) {
                    row.copy_from_slice(&nb.value);
                }
                needs |= nb.needs_grad;
            }
            kernels::matmul(&nx.value, &nw.value, &mut out, r, *i_dim, *o_dim);
            let mut shape = nx.shape.clone();
            *shape.last_mut().expect("non-empty") = *o_dim;
            (shape, out, needs)
        };
        let op = Op::Linear {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
        };
        self.tape.push(shape, value, op, needs)
    }

    fn zip_same(
        &self,
        b: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>, bool)> {
        self.same_tape(&b, name)?;
        let nodes = self.tape.nodes();
        let (na, nb) = (&nodes[self.id], &nodes[b.id]);
        if na.shape != nb.shape {
            return Err(Error::dim(
                name,
                format!("{:?} vs {:?}", na.shape, nb.shape),
            ));
        }
        let v = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((na.shape.clone(), v, na.needs_grad || nb.needs_grad))
    }

    pub fn add(&self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, v, n) = self.zip_same(b, "add", |x, y| x + y)?;
        self.tape.push(s, v, Op::Add(self.id, b.id), n)
    }

    pub fn sub(&self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, v, n) = self.zip_same(b, "sub", |x, y| x - y)?;
        self.tape.push(s, v, Op::Sub(self.id, b.id), n)
    }

    pub fn mul(&self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, v, n) = self.zip_same(b, "mul", |x, y| x * y)?;
        self.tape.push(s, v, Op::Mul(self.id, b.id), n)
    }

    pub fn scale(&self, c: T) -> Result<Var<'t, T>> {
        self.unary(
            |s, v| Ok((s.to_vec(), v.iter().map(|&x| x * c).collect())),
            || Op::Scale(self.id, c),
        )
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        self.unary(
            |_, v| Ok((vec![], vec![v.iter().copied().sum()])),
            || Op::Sum(self.id),
        )
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        self.unary(
            |_, v| {
                let s: T = v.iter().copied().sum();
                Ok((vec![], vec![s / T::of(v.len() as f64)]))
            },
            || Op::Mean(self.id),
        )
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        self.unary(
            |s, v| {
                let mut out = vec![T::zero(); v.len()];
                for o in 0..outer {
                    for c in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + c;
                        let mut max = T::neg_infinity();
                        for j in 0..len {
                            max = max.max(v[idx(j)]);
                        }
                        let mut z = T::zero();
                        for j in 0..len {
                            let e = (v[idx(j)] - max).exp();
                            out[idx(j)] = e;
                            z = z + e;
                        }
                        for j in 0..len {
                            out[idx(j)] = out[idx(j)] / z;
                        }
                    }
                }
                Ok((s.to_vec(), out))
            },
            || Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
        )
    }

    /// Per-row normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: Var<'t, T>, bias: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(&gain, "layernorm")?;
        self.same_tape(&bias, "layernorm")?;
        let (shape, value, xhat, rstd, needs) = {
            let nodes = self.tape.nodes();
            let (nx, ng, nb) = (&nodes[self.id], &nodes[gain.id], &nodes[bias.id]);
            let d = *nx.shape.last().unwrap_or(&1);
            if ng.value.len() != d || nb.value.len() != d || nx.shape.is_empty() {
                return Err(Error::dim(
                    "layernorm",
                    format!("x {:?}, gain {:?}, bias {:?}", nx.shape, ng.shape, nb.shape),
                ));
            }
            let rows = nx.value.len() / d;
            let inv_d = T::of(1.0 / d as f64);
            let mut out = vec![T::zero(); nx.value.len()];
            let mut xhat = vec![T::zero(); nx.value.len()];
            let mut rstd = vec![T::zero(); rows];
            for r in 0..rows {
                let xr = &nx.value[r * d..(r + 1) * d];
                let mean = xr.iter().copied().sum::<T>() * inv_d;
                let var = xr.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (xr[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * ng.value[j] + nb.value[j];
                }
            }
            let needs = nx.needs_grad || ng.needs_grad || nb.needs_grad;
            (nx.shape.clone(), out, xhat, rstd, needs)
        };
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            rstd,
        };
        self.tape.push(shape, value, op, needs)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Result<Var<'t, T>> {
        self.unary(
            |s, v| Ok((s.to_vec(), v.iter().map(|&x| gelu(x)).collect())),
            || Op::Gelu(self.id),
        )
    }

    /// `min(max(x, 0), 1)`; gradient is 1 strictly inside (0, 1), else 0.
    pub fn relu_clamp01(&self) -> Result<Var<'t, T>> {
        self.unary(
            |s, v| {
                Ok((
                    s.to_vec(),
                    v.iter().map(|&x| x.max(T::zero()).min(T::one())).collect(),
                ))
            },
            || Op::ClampUnit(self.id),
        )
    }

    /// Cosine similarity of every row of `self` with the vector `v`:
    /// `a·b / (max(‖a‖, eps) · max(‖b‖, eps))`.
    ///
    /// A `[d]` input yields a scalar, an `[n × d]` input yields `[n]`.
    pub fn cosine_sim(&self, v: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(&v, "cosine_sim")?;
        let (shape, value, z_norms, v_norm, needs) = {
            let nodes = self.tape.nodes();
            let (nz, nv) = (&nodes[self.id], &nodes[v.id]);
            let d = nv.value.len();
            if nv.shape.len() != 1 || nz.shape.last() != Some(&d) || nz.shape.len() > 2 {
                return Err(Error::dim(
                    "cosine_sim",
                    format!("{:?} vs {:?}", nz.shape, nv.shape),
                ));
            }
            let v_norm = dot(&nv.value, &nv.value).sqrt();
            let nb = v_norm.max(eps);
            let mut z_norms = Vec::new();
            let mut out = Vec::new();
            for zr in nz.value.chunks(d) {
                let na = dot(zr, zr).sqrt();
                z_norms.push(na);
                out.push(dot(zr, &nv.value) / (na.max(eps) * nb));
            }
            let shape = if nz.shape.len() == 2 {
                vec![nz.shape[0]]
            } else {
                vec![]
            };
            (shape, out, z_norms, v_norm, nz.needs_grad || nv.needs_grad)
        };
        let op = Op::RowCosine {
            z: self.id,
            v: v.id,
            eps,
            z_norms,
            v_norm,
        };
        self.tape.push(shape, value, op, needs)
    }

    /// Multiplies row `i` of an `[n × d]` tensor by `s[i]`.
    pub fn scale_rows(&self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&s, "scale_rows")?;
        let (shape, value, needs) = {
            let nodes = self.tape.nodes();
            let (nx, ns) = (&nodes[self.id], &nodes[s.id]);
            if nx.shape.len() != 2 || ns.value.len() != nx.shape[0] {
                return Err(Error::dim(
                    "scale_rows",
                    format!("{:?} vs {:?}", nx.shape, ns.shape),
                ));
            }
            let d = nx.shape[1];
            let mut out = nx.value.clone();
            for (row, &sv) in out.chunks_mut(d).zip(&ns.value) {
                row.iter_mut().for_each(|x| *x = *x * sv);
            }
            (nx.shape.clone(), out, nx.needs_grad || ns.needs_grad)
        };
        self.tape.push(
            shape,
            value,
            Op::ScaleRows {
                x: self.id,
                s: s.id,
            },
            needs,
        )
    }

    /// Softmax cross-entropy of a `[classes]` logit vector.
    pub fn cross_entropy(&self, label: usize) -> Result<Var<'t, T>> {
        let (value, probs, needs) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            if n.shape.len() != 1 || label >= n.value.len() {
                return Err(Error::dim(
                    "cross_entropy",
                    format!("logits {:?}, label {label}", n.shape),
                ));
            }
            let max = n.value.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = n.value.iter().map(|&x| (x - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            let probs: Vec<T> = exps.iter().map(|&e| e / z).collect();
            let loss = z.ln() + max - n.value[label];
            (vec![loss], probs, n.needs_grad)
        };
        let op = Op::CrossEntropy {
            logits: self.id,
            label,
            probs,
        };
        self.tape.push(vec![], value, op, needs)
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, sq, needs) = self.zip_same(b, "mse", |x, y| (x - y) * (x - y))?;
        let m = sq.iter().copied().sum::<T>() / T::of(sq.len() as f64);
        self.tape
            .push(vec![], vec![m], Op::Mse(self.id, b.id), needs)
    }

    /// Mean over rows of an `[n × d]` tensor.
    pub fn mean_rows(&self) -> Result<Var<'t, T>> {
        self.unary(
            |s, v| {
                let [n, d] = s else {
                    return Err(Error::dim("mean_rows", format!("shape {s:?}")));
                };
                let mut out = vec![T::zero(); *d];
                for row in v.chunks(*d) {
                    add_into(&mut out, row);
                }
                let inv = T::of(1.0 / *n as f64);
                out.iter_mut().for_each(|x| *x = *x * inv);
                Ok((vec![*d], out))
            },
            || Op::MeanRows(self.id),
        )
    }

    /// Rows `start..end` of an `[n × d]` tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t, T>> {
        self.unary(
            |s, v| {
                let [n, d] = s else {
                    return Err(Error::dim("slice_rows", format!("shape {s:?}")));
                };
                if start >= end || end > *n {
                    return Err(Error::dim("slice_rows", format!("{start}..{end} of {n}")));
                }
                Ok((vec![end - start, *d], v[start * d..end * d].to_vec()))
            },
            || Op::SliceRows { x: self.id, start },
        )
    }

    /// Row `i` of an `[n × d]` tensor as a `[d]` vector.
    pub fn row(&self, i: usize) -> Result<Var<'t, T>> {
        let r = self.slice_rows(i, i + 1)?;
        let d = r.shape()[1];
        r.reshape(&[d])
    }

    /// Stacks rows; `[d]` operands count as a single row.
    pub fn concat_rows(&self, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&b, "concat_rows")?;
        let (shape, value, needs) = {
            let nodes = self.tape.nodes();
            let (na, nb) = (&nodes[self.id], &nodes[b.id]);
            let rows = |s: &[usize]| match s {
                [d] => Some((1, *d)),
                [n, d] => Some((*n, *d)),
                _ => None,
            };
            let (Some((ra, da)), Some((rb, db))) = (rows(&na.shape), rows(&nb.shape)) else {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{:?}, {:?}", na.shape, nb.shape),
                ));
            };
            if da != db {
                return Err(Error::dim(
                    "concat_rows",
                    format!("{:?}, {:?}", na.shape, nb.shape),
                ));
            }
            let mut v = na.value.clone();
            v.extend_from_slice(&nb.value);
            (vec![ra + rb, da], v, na.needs_grad || nb.needs_grad)
        };
        self.tape
            .push(shape, value, Op::ConcatRows(self.id, b.id), needs)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        self.unary(
            |s, v| {
                if shape.iter().product::<usize>() != v.len() {
                    return Err(Error::dim("reshape", format!("{s:?} -> {shape:?}")));
                }
                Ok((shape.to_vec(), v.to_vec()))
            },
            || Op::Reshape(self.id),
        )
    }
}

/// Scaled dot-product attention over `heads` column groups of `[n × d]`
/// queries, keys and values. Returns the concatenated head outputs and the
/// `[heads × n × n]` probability maps.
pub fn multi_head_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
) -> Result<(Var<'t, T>, Tensor<T>)> {
    q.same_tape(&k, "attention")?;
    q.same_tape(&v, "attention")?;
    let tape = q.tape;
    let (shape, out, probs, needs) = {
        let nodes = tape.nodes();
        let (nq, nk, nv) = (&nodes[q.id], &nodes[k.id], &nodes[v.id]);
        let [n, d] = nq.shape.as_slice() else {
            return Err(Error::dim(
                "attention",
                format!("query shape {:?}", nq.shape),
            ));
        };
        if nk.shape != nq.shape || nv.shape != nq.shape {
            return Err(Error::dim(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", nq.shape, nk.shape, nv.shape),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("{d} channels over {heads} heads"),
            ));
        }
        let (out, probs) = attention_forward(&nq.value, &nk.value, &nv.value, *n, *d, heads);
        let needs = nq.needs_grad || nk.needs_grad || nv.needs_grad;
        (vec![*n, *d], out, probs, needs)
    };
    let n = shape[0];
    let map = Tensor {
        shape: vec![heads, n, n],
        data: probs.clone(),
        requires_grad: false,
        grad: None,
    };
    let op = Op::Attention {
        q: q.id,
        k: k.id,
        v: v.id,
        heads,
        probs,
    };
    Ok((tape.push(shape, out, op, needs)?, map))
}
