//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] borrows the parameter tensors and records every op applied to
//! them. Ops are coarse (linear layer, layer norm, attention block) and each
//! has a hand-written backward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec::{self, Exec};

use super::attention::{block_backward, block_forward, AttnLayout};
use super::scalar::Scalar;
use super::tensor::{gemm, MatMut, MatRef, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value on the tape: a borrowed parameter or a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    Param(usize),
    Node(usize),
}

enum Op<T> {
    Input,
    Embedding { table: Var, ids: Vec<u32> },
    Gather { src: Var, idx: Vec<Option<usize>> },
    Concat { parts: Vec<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Attention { qkv: Var, layout: Arc<AttnLayout>, heads: usize, probs: Vec<Vec<T>> },
    CrossEntropy { logits: Var, targets: Vec<Option<u32>>, probs: Vec<T>, inv_denom: T },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Embedding { .. } => "embedding",
            Op::Gather { .. } => "gather_rows",
            Op::Concat { .. } => "concat_rows",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
    exec: Exec,
    non_finite: Option<&'static str>,
}

/// Gradients of a scalar w.r.t. every parameter and node that influenced it.
pub struct Gradients<T> {
    pub params: Vec<Option<Vec<T>>>,
    pub nodes: Vec<Option<Vec<T>>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        match v {
            Var::Param(i) => self.params[i].as_deref(),
            Var::Node(i) => self.nodes[i].as_deref(),
        }
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x);
    (y, dy)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            exec: Exec::Sequential,
            non_finite: None,
        }
    }

    /// Execution mode for block-parallel ops (attention).
    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match v {
            Var::Param(i) => &self.params[i],
            Var::Node(i) => &self.nodes[i].value,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op });
        Var::Node(self.nodes.len() - 1)
    }

    /// First op that produced a NaN or infinity, as an error.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite { op: op.to_string() }),
            None => Ok(()),
        }
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= n {
                return Err(Error::Shape(format!("embedding id {id} out of range for {n} rows")));
            }
            out.extend_from_slice(t.row(id as usize));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Rows of `src` by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let s = self.value(src);
        let (n, d) = (s.rows(), s.cols());
        let mut out = vec![T::zero(); idx.len() * d];
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= n {
                    return Err(Error::Shape(format!("gather index {i} out of range for {n} rows")));
                }
                out[r * d..(r + 1) * d].copy_from_slice(s.row(i));
            }
        }
        let value = Tensor::new(vec![idx.len(), d], out)?;
        Ok(self.push(value, Op::Gather { src, idx }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return Err(Error::Shape(format!("concat of widths {d} and {}", t.cols())));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// `x [n, in] · w [in, out] + b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, d_in) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.rows() != d_in {
            return Err(Error::Shape(format!(
                "linear input width {d_in} vs weight {:?}",
                wv.shape()
            )));
        }
        let d_out = wv.cols();
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != d_out {
                return Err(Error::Shape(format!("bias of {} for width {d_out}", bv.len())));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(xv.data(), n, d_in),
            MatRef::new(wv.data(), d_in, d_out),
            beta,
            MatMut::new(&mut out, n, d_out),
        );
        let value = Tensor::new(vec![n, d_out], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    /// Row-wise layer normalization with gain `g` and bias `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(g), self.value(b));
        if gv.len() != d || bv.len() != d {
            return Err(Error::Shape(format!("layer norm of width {d} with gain {}", gv.len())));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        Ok(self.push(value, Op::LayerNorm { x, g, b, xhat, rstd }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_parts(v).0).collect();
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(x))
    }

    /// Multi-head self-attention over a fused `[rows, 3D]` projection.
    pub fn attention(&mut self, qkv: Var, layout: Arc<AttnLayout>, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        if !qv.cols().is_multiple_of(3) || qv.rows() != layout.rows {
            return Err(Error::Shape(format!(
                "attention input {:?} for a layout of {} rows",
                qv.shape(),
                layout.rows
            )));
        }
        let dim = qv.cols() / 3;
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Shape(format!("{heads} heads do not divide dimension {dim}")));
        }
        let data = qv.data();
        let results = exec::map(self.exec, &layout.blocks, |b| block_forward(data, dim, heads, b));
        let mut out = vec![T::zero(); layout.rows * dim];
        let mut probs = Vec::with_capacity(results.len());
        for (b, (o, p)) in layout.blocks.iter().zip(results) {
            out[b.start * dim..b.start * dim + o.len()].copy_from_slice(&o);
            probs.push(p);
        }
        let value = Tensor::new(vec![layout.rows, dim], out)?;
        Ok(self.push(value, Op::Attention { qkv, layout, heads, probs }))
    }

    /// Sum of negative log-likelihoods at rows with a target, divided by
    /// `denom`. Rows with `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<u32>], denom: usize) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(Error::Shape(format!("{} targets for {n} logit rows", targets.len())));
        }
        if targets.iter().all(Option::is_none) || denom == 0 {
            return Err(Error::NoTargets);
        }
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t as usize >= v {
                return Err(Error::Shape(format!("target {t} outside vocabulary of {v}")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * v..(r + 1) * v];
            let mut z = T::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                z += *pi;
            }
            let inv = T::one() / z;
            p.iter_mut().for_each(|pi| *pi *= inv);
            total += z.ln() + max - row[t as usize];
        }
        let inv_denom = T::one() / T::of(denom as f64);
        let value = Tensor::scalar(total * inv_denom);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                inv_denom,
            },
        ))
    }

    /// Gradients of the scalar `loss` w.r.t. everything on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_finite()?;
        let Var::Node(root) = loss else {
            return Err(Error::Shape("loss must be a recorded node".into()));
        };
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Shape("loss must be a scalar".into()));
        }
        let mut pg: Vec<Option<Vec<T>>> = vec![None; self.params.len()];
        let mut ng: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        ng[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            let Some(dy) = ng[i].take() else { continue };
            self.backward_node(i, &dy, &mut pg, &mut ng);
            ng[i] = Some(dy);
        }
        for (i, g) in pg.iter().chain(ng.iter()).enumerate() {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite { op: format!("gradient #{i}") });
            }
        }
        Ok(Gradients { params: pg, nodes: ng })
    }

    fn backward_node(&self, i: usize, dy: &[T], pg: &mut [Option<Vec<T>>], ng: &mut [Option<Vec<T>>]) {
        macro_rules! grad {
            ($v:expr) => {
                slot(pg, ng, $v, self.value($v).len())
            };
        }
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                let g = grad!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                        *a += b;
                    }
                }
            }
            Op::Gather { src, idx } => {
                let d = self.value(*src).cols();
                let g = grad!(*src);
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        for (a, &b) in g[i * d..(i + 1) * d].iter_mut().zip(&dy[r * d..(r + 1) * d]) {
                            *a += b;
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let g = grad!(p);
                    for (a, &b) in g.iter_mut().zip(&dy[off..off + len]) {
                        *a += b;
                    }
                    off += len;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let g = grad!(v);
                    for (x, &d) in g.iter_mut().zip(dy) {
                        *x += d;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let o = self.value(other).data();
                    let g = grad!(v);
                    for ((x, &d), &w) in g.iter_mut().zip(dy).zip(o) {
                        *x += d * w;
                    }
                }
            }
            Op::Sum(a) => {
                let g = grad!(*a);
                g.iter_mut().for_each(|x| *x += dy[0]);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, d_in, d_out) = (xv.rows(), xv.cols(), wv.cols());
                let dym = MatRef::new(dy, n, d_out);
                let gx = grad!(*x);
                gemm(T::one(), dym, MatRef::new(wv.data(), d_in, d_out).t(), T::one(), MatMut::new(gx, n, d_in));
                let gw = grad!(*w);
                gemm(T::one(), MatRef::new(xv.data(), n, d_in).t(), dym, T::one(), MatMut::new(gw, d_in, d_out));
                if let Some(b) = b {
                    let gb = grad!(*b);
                    for row in dy.chunks(d_out) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let d = self.value(*g).len();
                let gain = self.value(*g).data();
                let inv_d = T::one() / T::of(d as f64);
                {
                    let gx = grad!(*x);
                    for r in 0..rstd.len() {
                        let dyr = &dy[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for c in 0..d {
                            let dxh = dyr[c] * gain[c];
                            m1 += dxh;
                            m2 += dxh * xh[c];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for c in 0..d {
                            let dxh = dyr[c] * gain[c];
                            gx[r * d + c] += rstd[r] * (dxh - m1 - xh[c] * m2);
                        }
                    }
                }
                let gg = grad!(*g);
                for (dyr, xh) in dy.chunks(d).zip(xhat.chunks(d)) {
                    for c in 0..d {
                        gg[c] += dyr[c] * xh[c];
                    }
                }
                let gb = grad!(*b);
                for dyr in dy.chunks(d) {
                    for (a, &v) in gb.iter_mut().zip(dyr) {
                        *a += v;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let g = grad!(*x);
                for ((a, &d), &v) in g.iter_mut().zip(dy).zip(xv) {
                    *a += d * gelu_parts(v).1;
                }
            }
            Op::Attention { qkv, layout, heads, probs } => {
                let qv = self.value(*qkv);
                let dim = qv.cols() / 3;
                let data = qv.data();
                let idx: Vec<usize> = (0..layout.blocks.len()).collect();
                let parts = exec::map(self.exec, &idx, |&bi| {
                    block_backward(data, dy, &probs[bi], dim, *heads, &layout.blocks[bi])
                });
                let g = grad!(*qkv);
                for (b, part) in layout.blocks.iter().zip(parts) {
                    let dst = &mut g[b.start * 3 * dim..b.start * 3 * dim + part.len()];
                    for (a, &v) in dst.iter_mut().zip(&part) {
                        *a += v;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, inv_denom } => {
                let v = self.value(*logits).cols();
                let scale = dy[0] * *inv_denom;
                let g = grad!(*logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = &mut g[r * v..(r + 1) * v];
                    for (a, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *a += scale * p;
                    }
                    row[t as usize] -= scale;
                }
            }
        }
    }
}

fn slot<'a, T: Scalar>(pg: &'a mut [Option<Vec<T>>], ng: &'a mut [Option<Vec<T>>], v: Var, len: usize) -> &'a mut Vec<T> {
    let s = match v {
        Var::Param(p) => &mut pg[p],
        Var::Node(n) => &mut ng[n],
    };
    s.get_or_insert_with(|| vec![T::zero(); len])
}

/// Mean negative log-likelihood over positions whose target is not `ignore_id`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[u32], ignore_id: u32) -> Result<T> {
    let t: Vec<Option<u32>> = targets.iter().map(|&t| (t != ignore_id).then_some(t)).collect();
    let count = t.iter().flatten().count();
    let mut g = Graph::new(std::slice::from_ref(logits));
    let loss = g.cross_entropy(Var::Param(0), &t, count)?;
    g.check_finite()?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Tensor::<f64>::zeros(&[3, 7]);
        let loss = cross_entropy(&logits, &[1, 2, 3], 0).unwrap();
        assert!((loss - (7f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = Tensor::from_fn(&[1, 4], |i| if i == 2 { margin } else { 0.0 });
            let loss = cross_entropy(&logits, &[2], 0).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn random_case_matches_direct_sum() {
        let vals = [0.3, -1.2, 2.0, 0.5, 0.0, 1.1, 0.7, -0.4, -2.2, 0.9];
        let logits = Tensor::new(vec![2, 5], vals.to_vec()).unwrap();
        let targets = [4u32, 1];
        let mut expected = 0.0;
        for r in 0..2 {
            let row = &vals[r * 5..(r + 1) * 5];
            let z: f64 = row.iter().map(|x: &f64| x.exp()).sum();
            expected += -(row[targets[r] as usize].exp() / z).ln();
        }
        expected /= 2.0;
        assert!((cross_entropy(&logits, &targets, 0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_is_an_error() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(cross_entropy(&logits, &[0, 0], 0), Err(Error::NoTargets)));
    }

    #[test]
    fn non_finite_values_are_reported() {
        let params = [Tensor::new(vec![1, 2], vec![f64::NAN, 1.0]).unwrap()];
        let mut g = Graph::new(&params);
        let s = g.sum(Var::Param(0));
        assert!(matches!(g.backward(s), Err(Error::NonFinite { .. })));
    }
}
