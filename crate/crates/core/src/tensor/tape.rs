use std::cell::{Ref, RefCell};

use rand::Rng;

use super::gemm::{matmul_into, Transpose};
use super::{cst, is_masked, softmax_row, Real, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;
const NORM_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    /// `a · op(b)`
    MatMul { a: usize, b: usize, tb: Transpose },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Exp(usize),
    Log(usize),
    Gelu(usize),
    Transpose(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Embedding { table: usize, ids: Vec<usize> },
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<T> },
    Sum(usize),
    Mean(usize),
    Dropout { a: usize, mask: Vec<T> },
    Softmax(usize),
    Rope { a: usize, cos: Vec<T>, sin: Vec<T> },
    L2Normalize { a: usize, norms: Vec<T> },
    Cosine { a: usize, b: usize, na: Vec<T>, nb: Vec<T> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// replay them in reverse. Single-threaded; one tape per differentiated
/// computation.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].needs_grad)
        };
        self.push_node(value, op, needs_grad)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gather rows of `table` (`vocab × d`) at `ids`.
    pub fn embedding<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let t = self.value(table.id);
            let (rows, d) = t.dims2()?;
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= rows {
                    return Err(Error::Shape(format!("embedding id {i} out of range for {rows} rows")));
                }
                out.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![ids.len(), d], out)?
        };
        Ok(self.push(
            value,
            Op::Embedding {
                table: table.id,
                ids: ids.to_vec(),
            },
            &[table.id],
        ))
    }

    /// Stack matrices vertically.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        self.concat(parts, 0)
    }

    /// Stack matrices side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        self.concat(parts, 1)
    }

    fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let dims: Vec<(usize, usize)> = parts
                .iter()
                .map(|p| nodes[p.id].value.dims2())
                .collect::<Result<_>>()?;
            if axis == 0 {
                let c = dims[0].1;
                if dims.iter().any(|d| d.1 != c) {
                    return Err(Error::Shape(format!("concat_rows column mismatch {dims:?}")));
                }
                let data: Vec<T> = parts
                    .iter()
                    .flat_map(|p| nodes[p.id].value.data().iter().copied())
                    .collect();
                let r = dims.iter().map(|d| d.0).sum();
                Tensor::new(vec![r, c], data)?
            } else {
                let r = dims[0].0;
                if dims.iter().any(|d| d.0 != r) {
                    return Err(Error::Shape(format!("concat_cols row mismatch {dims:?}")));
                }
                let c: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for p in parts {
                        data.extend_from_slice(nodes[p.id].value.row(i));
                    }
                }
                Tensor::new(vec![r, c], data)?
            }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(
            value,
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// Gradients of the scalar `root` with respect to every differentiable leaf.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let shape = self.value(root.id).shape().to_vec();
        if self.value(root.id).numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar, got shape {shape:?}")));
        }
        self.backward_with(root, Tensor::full(&shape, T::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `root`.
    pub fn backward_with(&self, root: Var<'_, T>, seed: Tensor<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[root.id].value.shape() {
            return Err(shape_err("backward seed", seed.shape(), nodes[root.id].value.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.id + 1];
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(seed.into_data());

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut acc = |target: usize, f: &mut dyn FnMut(&mut [T])| {
                if nodes[target].needs_grad {
                    let buf = grads[target].get_or_insert_with(|| vec![T::zero(); nodes[target].value.numel()]);
                    f(buf);
                }
            };
            let val = |i: usize| nodes[i].value.data();
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul { a, b, tb } => {
                    let (m, k) = nodes[*a].value.dims2()?;
                    let n = node.value.cols();
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, &mut |da| match tb {
                        Transpose::No => matmul_into(m, n, k, &g, Transpose::No, bv, Transpose::Yes, da, T::one()),
                        Transpose::Yes => matmul_into(m, n, k, &g, Transpose::No, bv, Transpose::No, da, T::one()),
                    });
                    acc(*b, &mut |db| match tb {
                        Transpose::No => matmul_into(k, m, n, av, Transpose::Yes, &g, Transpose::No, db, T::one()),
                        Transpose::Yes => matmul_into(n, m, k, &g, Transpose::Yes, av, Transpose::No, db, T::one()),
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d -= *g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(*a, &mut |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += *g * *y;
                        }
                    });
                    acc(*b, &mut |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(av) {
                            *d += *g * *x;
                        }
                    });
                }
                Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += *c * *g)),
                Op::Exp(a) => {
                    let y = node.value.data();
                    acc(*a, &mut |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += *g * *y;
                        }
                    });
                }
                Op::Log(a) => {
                    let x = val(*a);
                    acc(*a, &mut |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            *d += *g / *x;
                        }
                    });
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    acc(*a, &mut |d| {
                        for ((d, g), &x) in d.iter_mut().zip(&g).zip(x) {
                            *d += *g * gelu_grad(x);
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (r, c) = nodes[*a].value.dims2()?;
                    acc(*a, &mut |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut off = 0;
                        for &p in parts {
                            let len = nodes[p].value.numel();
                            acc(p, &mut |d| add_into(d, &g[off..off + len]));
                            off += len;
                        }
                    } else {
                        let (rows, total) = node.value.dims2()?;
                        let mut col = 0;
                        for &p in parts {
                            let w = nodes[p].value.cols();
                            acc(p, &mut |d| {
                                for i in 0..rows {
                                    add_into(&mut d[i * w..(i + 1) * w], &g[i * total + col..i * total + col + w]);
                                }
                            });
                            col += w;
                        }
                    }
                }
                Op::Slice { a, axis, start } => {
                    let (r, c) = nodes[*a].value.dims2()?;
                    let (or, oc) = node.value.dims2()?;
                    acc(*a, &mut |d| {
                        if *axis == 0 {
                            add_into(&mut d[start * c..(start + or) * c], &g);
                        } else {
                            for i in 0..r {
                                add_into(&mut d[i * c + start..i * c + start + oc], &g[i * oc..(i + 1) * oc]);
                            }
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let dim = nodes[*table].value.cols();
                    acc(*table, &mut |d| {
                        for (row, &i) in ids.iter().enumerate() {
                            add_into(&mut d[i * dim..(i + 1) * dim], &g[row * dim..(row + 1) * dim]);
                        }
                    });
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let (rows, dim) = nodes[*x].value.dims2()?;
                    let (xv, gv) = (val(*x), val(*gain));
                    acc(*x, &mut |d| {
                        let n = cst::<T>(dim as f64);
                        for i in 0..rows {
                            let r = inv_rms[i];
                            let xr = &xv[i * dim..(i + 1) * dim];
                            let gr = &g[i * dim..(i + 1) * dim];
                            let s: T = (0..dim).map(|j| gr[j] * gv[j] * xr[j]).sum();
                            let coef = r * r * r * s / n;
                            for j in 0..dim {
                                d[i * dim + j] += r * gr[j] * gv[j] - xr[j] * coef;
                            }
                        }
                    });
                    acc(*gain, &mut |d| {
                        for i in 0..rows {
                            for j in 0..dim {
                                d[j] += g[i * dim + j] * xv[i * dim + j] * inv_rms[i];
                            }
                        }
                    });
                }
                Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
                Op::Mean(a) => {
                    let n = cst::<T>(nodes[*a].value.numel() as f64);
                    acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
                }
                Op::Dropout { a, mask } => acc(*a, &mut |d| {
                    for ((d, g), m) in d.iter_mut().zip(&g).zip(mask) {
                        *d += *g * *m;
                    }
                }),
                Op::Softmax(a) => {
                    let (r, c) = node.value.dims2()?;
                    let y = node.value.data();
                    acc(*a, &mut |d| {
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: T = yr.iter().zip(gr).map(|(y, g)| *y * *g).sum();
                            for j in 0..c {
                                d[i * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::Rope { a, cos, sin } => acc(*a, &mut |d| {
                    for p in 0..cos.len() {
                        let (g0, g1) = (g[2 * p], g[2 * p + 1]);
                        d[2 * p] += g0 * cos[p] + g1 * sin[p];
                        d[2 * p + 1] += g1 * cos[p] - g0 * sin[p];
                    }
                }),
                Op::L2Normalize { a, norms } => {
                    let (r, c) = node.value.dims2()?;
                    let y = node.value.data();
                    acc(*a, &mut |d| {
                        for i in 0..r {
                            let yr = &y[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: T = yr.iter().zip(gr).map(|(y, g)| *y * *g).sum();
                            for j in 0..c {
                                d[i * c + j] += (gr[j] - yr[j] * dot) / norms[i];
                            }
                        }
                    });
                }
                Op::Cosine { a, b, na, nb } => {
                    let (r, c) = nodes[*a].value.dims2()?;
                    let (av, bv) = (val(*a), val(*b));
                    let cosv = node.value.data();
                    for (src, other, ns, no) in [(*a, bv, na, nb), (*b, av, nb, na)] {
                        let own = val(src);
                        acc(src, &mut |d| {
                            for i in 0..r {
                                let denom = ns[i] * no[i];
                                for j in 0..c {
                                    let k = i * c + j;
                                    d[k] += g[i] * (other[k] / denom - cosv[i] * own[k] / (ns[i] * ns[i]));
                                }
                            }
                        });
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let c = nodes[*logits].value.cols();
                    let scale = g[0] / cst::<T>(targets.len() as f64);
                    acc(*logits, &mut |d| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == t { T::one() } else { T::zero() };
                                d[i * c + j] += scale * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn gelu<T: Real>(x: T) -> T {
    let c = cst::<T>(GELU_C);
    let u = c * (x + cst::<T>(GELU_A) * x * x * x);
    cst::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = cst::<T>(GELU_C);
    let a = cst::<T>(GELU_A);
    let half = cst::<T>(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + cst::<T>(3.0) * a * x * x)
}

/// Per-leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` for constants or leaves the root does not
    /// depend on.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.leaves.get_mut(v.id).and_then(Option::take)
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn item(&self) -> T {
        self.tape.value(self.id).item()
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Var<'t, T> {
        let value = self.tape.value(self.id).map(f);
        self.tape.push(value, op, &[self.id])
    }

    fn check_same(self, other: Var<'t, T>, what: &str) -> Result<()> {
        let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
        if a.shape() != b.shape() {
            return Err(shape_err(what, a.shape(), b.shape()));
        }
        Ok(())
    }

    fn zip(self, other: Var<'t, T>, what: &str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        self.check_same(other, what)?;
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.push(value, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = cst::<T>(c);
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), T::exp)
    }

    pub fn log(self) -> Var<'t, T> {
        self.unary(Op::Log(self.id), T::ln)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    fn matmul_op(self, other: Var<'t, T>, tb: Transpose) -> Result<Var<'t, T>> {
        let value = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            let (m, k) = a.dims2()?;
            let (br, bc) = b.dims2()?;
            let (k2, n) = match tb {
                Transpose::No => (br, bc),
                Transpose::Yes => (bc, br),
            };
            if k != k2 || a.shape().len() != 2 || b.shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "matmul of {:?} by {:?}{}",
                    a.shape(),
                    b.shape(),
                    if tb == Transpose::Yes { "ᵀ" } else { "" }
                )));
            }
            let mut out = vec![T::zero(); m * n];
            matmul_into(m, k, n, a.data(), Transpose::No, b.data(), tb, &mut out, T::zero());
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
                tb,
            },
            &[self.id, other.id],
        ))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_op(other, Transpose::No)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_op(other, Transpose::Yes)
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let value = self.tape.value(self.id).transpose()?;
        Ok(self.tape.push(value, Op::Transpose(self.id), &[self.id]))
    }

    pub fn sum(self) -> Var<'t, T> {
        let s: T = self.tape.value(self.id).data().iter().copied().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t, T> {
        let v = self.tape.value(self.id);
        let s: T = v.data().iter().copied().sum::<T>() / cst::<T>(v.numel() as f64);
        drop(v);
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let value = self.tape.value(self.id).softmax_rows()?;
        Ok(self.tape.push(value, Op::Softmax(self.id), &[self.id]))
    }

    fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t, T>> {
        let value = {
            let v = self.tape.value(self.id);
            let (r, c) = v.dims2()?;
            let bound = if axis == 0 { r } else { c };
            if start >= end || end > bound {
                return Err(Error::Shape(format!(
                    "slice {start}..{end} on axis {axis} of {:?}",
                    v.shape()
                )));
            }
            if axis == 0 {
                Tensor::new(vec![end - start, c], v.data()[start * c..end * c].to_vec())?
            } else {
                let w = end - start;
                let mut out = Vec::with_capacity(r * w);
                for i in 0..r {
                    out.extend_from_slice(&v.row(i)[start..end]);
                }
                Tensor::new(vec![r, w], out)?
            }
        };
        Ok(self.tape.push(
            value,
            Op::Slice {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        self.slice(0, start, end)
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        self.slice(1, start, end)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) ⊙ gain`.
    pub fn rms_norm(self, gain: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (value, inv_rms) = {
            let (x, gv) = (self.tape.value(self.id), self.tape.value(gain.id));
            let (r, c) = x.dims2()?;
            if gv.numel() != c {
                return Err(shape_err("rms_norm gain", gv.shape(), x.shape()));
            }
            let mut out = Vec::with_capacity(r * c);
            let mut inv = Vec::with_capacity(r);
            for i in 0..r {
                let row = x.row(i);
                let ms: T = row.iter().map(|&v| v * v).sum::<T>() / cst::<T>(c as f64);
                let ir = T::one() / (ms + cst::<T>(eps)).sqrt();
                inv.push(ir);
                out.extend(row.iter().zip(gv.data()).map(|(&v, &g)| v * ir * g));
            }
            (Tensor::new(x.shape().to_vec(), out)?, inv)
        };
        Ok(self.tape.push(
            value,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                inv_rms,
            },
            &[self.id, gain.id],
        ))
    }

    /// Inverted dropout: zero each entry with probability `p`, scale the
    /// survivors by `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout(self, p: f64, rng: &mut impl Rng) -> Var<'t, T> {
        if p <= 0.0 {
            return self;
        }
        let keep = cst::<T>(1.0 / (1.0 - p));
        let numel = self.tape.value(self.id).numel();
        let mask: Vec<T> = (0..numel)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let value = {
            let v = self.tape.value(self.id);
            let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            Tensor::new(v.shape().to_vec(), data).expect("same shape")
        };
        self.tape.push(value, Op::Dropout { a: self.id, mask }, &[self.id])
    }

    /// Rotate column pairs `(2i, 2i+1)` of row `r` by `positions[r]·theta^(−2i/d)`.
    pub fn rope(self, positions: &[usize], theta: f64) -> Result<Var<'t, T>> {
        let (value, cos, sin) = {
            let x = self.tape.value(self.id);
            let (r, d) = x.dims2()?;
            if d % 2 != 0 || positions.len() != r {
                return Err(Error::Shape(format!(
                    "rope needs an even width and one position per row; got {:?} with {} positions",
                    x.shape(),
                    positions.len()
                )));
            }
            let half = d / 2;
            let mut cos = Vec::with_capacity(r * half);
            let mut sin = Vec::with_capacity(r * half);
            let mut out = vec![T::zero(); r * d];
            for (i, &pos) in positions.iter().enumerate() {
                for p in 0..half {
                    let freq = theta.powf(-2.0 * p as f64 / d as f64);
                    let (s, c) = (pos as f64 * freq).sin_cos();
                    let (c, s) = (cst::<T>(c), cst::<T>(s));
                    let (x0, x1) = (x.data()[i * d + 2 * p], x.data()[i * d + 2 * p + 1]);
                    out[i * d + 2 * p] = x0 * c - x1 * s;
                    out[i * d + 2 * p + 1] = x0 * s + x1 * c;
                    cos.push(c);
                    sin.push(s);
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, cos, sin)
        };
        Ok(self.tape.push(value, Op::Rope { a: self.id, cos, sin }, &[self.id]))
    }

    pub fn l2_normalize_rows(self) -> Result<Var<'t, T>> {
        let (value, norms) = {
            let x = self.tape.value(self.id);
            let (r, _) = x.dims2()?;
            let mut norms = Vec::with_capacity(r);
            let mut out = Vec::with_capacity(x.numel());
            for i in 0..r {
                let row = x.row(i);
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(cst(NORM_FLOOR));
                norms.push(n);
                out.extend(row.iter().map(|&v| v / n));
            }
            (Tensor::new(x.shape().to_vec(), out)?, norms)
        };
        Ok(self.tape.push(value, Op::L2Normalize { a: self.id, norms }, &[self.id]))
    }

    /// Cosine similarity of matching rows, shape `[rows, 1]`.
    pub fn cosine_rows(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same(other, "cosine_rows")?;
        let (value, na, nb) = {
            let (a, b) = (self.tape.value(self.id), self.tape.value(other.id));
            let (r, _) = a.dims2()?;
            let norm = |row: &[T]| row.iter().map(|&v| v * v).sum::<T>().sqrt().max(cst(NORM_FLOOR));
            let mut na = Vec::with_capacity(r);
            let mut nb = Vec::with_capacity(r);
            let mut out = Vec::with_capacity(r);
            for i in 0..r {
                let (ra, rb) = (a.row(i), b.row(i));
                let (x, y) = (norm(ra), norm(rb));
                let dot: T = ra.iter().zip(rb).map(|(&p, &q)| p * q).sum();
                out.push(dot / (x * y));
                na.push(x);
                nb.push(y);
            }
            (Tensor::new(vec![r, 1], out)?, na, nb)
        };
        Ok(self.tape.push(
            value,
            Op::Cosine {
                a: self.id,
                b: other.id,
                na,
                nb,
            },
            &[self.id, other.id],
        ))
    }

    /// Mean over rows of `−log softmax(row)[target]`, stabilized by
    /// log-sum-exp. Masked entries contribute nothing to the normalizer.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t, T>> {
        let (loss, probs) = {
            let x = self.tape.value(self.id);
            let (r, c) = x.dims2()?;
            if targets.len() != r || targets.iter().any(|&t| t >= c) {
                return Err(Error::Shape(format!(
                    "cross_entropy targets {targets:?} for logits {:?}",
                    x.shape()
                )));
            }
            let mut probs = x.data().to_vec();
            let mut total = T::zero();
            for (i, &t) in targets.iter().enumerate() {
                let row = x.row(i);
                if is_masked(row[t]) {
                    return Err(Error::Numerical(format!("cross_entropy target {t} of row {i} is masked")));
                }
                let max = row
                    .iter()
                    .copied()
                    .filter(|&v| !is_masked(v))
                    .fold(T::neg_infinity(), T::max);
                let lse = row
                    .iter()
                    .filter(|&&v| !is_masked(v))
                    .map(|&v| (v - max).exp())
                    .sum::<T>()
                    .ln()
                    + max;
                total += lse - row[t];
                softmax_row(&mut probs[i * c..(i + 1) * c]).map_err(|_| {
                    Error::Numerical(format!("cross_entropy row {i} is fully masked"))
                })?;
            }
            (total / cst::<T>(r as f64), probs)
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            &[self.id],
        ))
    }
}
