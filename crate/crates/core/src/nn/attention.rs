//! Multi-head scaled dot-product attention restricted by boolean masks.
//!
//! Sequences are laid out as independent blocks of rows; each block carries
//! its own mask and never attends outside itself. A word-level encoder is
//! then one block per word, a flat decoder one causal block per sequence.

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::{gemm, MatMut, MatRef, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_q: usize,
    n_k: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    /// Validates that every query row allows at least one key.
    pub fn new(n_q: usize, n_k: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != n_q * n_k {
            return Err(Error::Shape(format!(
                "mask of {n_q}x{n_k} needs {} entries, got {}",
                n_q * n_k,
                allow.len()
            )));
        }
        for row in 0..n_q {
            if n_k == 0 || !allow[row * n_k..(row + 1) * n_k].iter().any(|&a| a) {
                return Err(Error::EmptyMaskRow { row });
            }
        }
        Ok(AttentionMask { n_q, n_k, allow })
    }

    pub fn from_fn(n_q: usize, n_k: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allow = (0..n_q * n_k).map(|i| f(i / n_k.max(1), i % n_k.max(1))).collect();
        Self::new(n_q, n_k, allow)
    }

    pub fn full(n: usize) -> Self {
        AttentionMask {
            n_q: n,
            n_k: n,
            allow: vec![true; n * n],
        }
    }

    pub fn causal(n: usize) -> Self {
        AttentionMask {
            n_q: n,
            n_k: n,
            allow: (0..n * n).map(|i| i % n <= i / n).collect(),
        }
    }

    /// Bidirectional attention inside consecutive blocks of the given sizes.
    pub fn block_diagonal(sizes: &[usize]) -> Result<Self> {
        let n: usize = sizes.iter().sum();
        let mut block_of = Vec::with_capacity(n);
        for (b, &s) in sizes.iter().enumerate() {
            block_of.extend(std::iter::repeat_n(b, s));
        }
        Self::from_fn(n, n, |i, j| block_of[i] == block_of[j])
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.n_k + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.n_k..(q + 1) * self.n_k]
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    pub fn is_causal(&self) -> bool {
        (0..self.n_q).all(|q| (q + 1..self.n_k).all(|k| !self.allowed(q, k)))
    }
}

/// One self-attention block: rows `start .. start + mask.n_q()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnBlock {
    pub start: usize,
    pub mask: AttentionMask,
}

/// Rows of a packed activation matrix split into independent blocks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttnLayout {
    pub rows: usize,
    pub blocks: Vec<AttnBlock>,
}

impl AttnLayout {
    pub fn new(rows: usize, blocks: Vec<AttnBlock>) -> Result<Self> {
        let mut covered = vec![false; rows];
        for b in &blocks {
            if b.mask.n_q != b.mask.n_k {
                return Err(Error::Shape("self-attention block mask must be square".into()));
            }
            if b.start + b.mask.n_q > rows {
                return Err(Error::Shape(format!(
                    "block at row {} of length {} exceeds {rows} rows",
                    b.start, b.mask.n_q
                )));
            }
            for c in &mut covered[b.start..b.start + b.mask.n_q] {
                if *c {
                    return Err(Error::Shape("attention blocks overlap".into()));
                }
                *c = true;
            }
        }
        Ok(AttnLayout { rows, blocks })
    }

    /// A single block covering every row.
    pub fn single(mask: AttentionMask) -> Self {
        AttnLayout {
            rows: mask.n_q,
            blocks: vec![AttnBlock { start: 0, mask }],
        }
    }
}

/// Softmax over allowed entries of each row, in place; masked entries become 0.
fn masked_softmax_rows<T: Scalar>(scores: &mut [T], mask: &AttentionMask) {
    let n_k = mask.n_k;
    for (q, row) in scores.chunks_mut(n_k).enumerate() {
        let allow = mask.row(q);
        let mut max = T::neg_infinity();
        for (s, &a) in row.iter().zip(allow) {
            if a && *s > max {
                max = *s;
            }
        }
        let mut sum = T::zero();
        for (s, &a) in row.iter_mut().zip(allow) {
            *s = if a { (*s - max).exp() } else { T::zero() };
            sum += *s;
        }
        let inv = T::one() / sum;
        for s in row.iter_mut() {
            *s *= inv;
        }
    }
}

/// One head: `probs = softmax(scale * q kᵀ | mask)`, `out = probs v`.
pub(crate) fn head_forward<T: Scalar>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    mask: &AttentionMask,
    scale: T,
    probs: &mut [T],
    out: MatMut<'_, T>,
) {
    let (n_q, n_k) = (q.rows, k.rows);
    gemm(scale, q, k.t(), T::zero(), MatMut::new(probs, n_q, n_k));
    masked_softmax_rows(probs, mask);
    gemm(T::one(), MatRef::new(probs, n_q, n_k), v, T::zero(), out);
}

/// Forward pass of one self-attention block over a fused `[rows, 3D]` qkv
/// buffer. Returns the block output `[len, D]` and per-head probabilities.
pub(crate) fn block_forward<T: Scalar>(qkv: &[T], dim: usize, heads: usize, block: &AttnBlock) -> (Vec<T>, Vec<T>) {
    let len = block.mask.n_q;
    let hd = dim / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut out = vec![T::zero(); len * dim];
    let mut probs = vec![T::zero(); heads * len * len];
    for (h, p) in probs.chunks_mut(len * len).enumerate() {
        let q = MatRef::window(qkv, 3 * dim, block.start, len, h * hd, hd);
        let k = MatRef::window(qkv, 3 * dim, block.start, len, dim + h * hd, hd);
        let v = MatRef::window(qkv, 3 * dim, block.start, len, 2 * dim + h * hd, hd);
        head_forward(q, k, v, &block.mask, scale, p, MatMut::window(&mut out, dim, 0, len, h * hd, hd));
    }
    (out, probs)
}

/// Backward pass of [`block_forward`]: gradient w.r.t. the block's qkv rows,
/// laid out `[len, 3D]`.
pub(crate) fn block_backward<T: Scalar>(
    qkv: &[T],
    dout: &[T],
    probs: &[T],
    dim: usize,
    heads: usize,
    block: &AttnBlock,
) -> Vec<T> {
    let len = block.mask.n_q;
    let hd = dim / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut dqkv = vec![T::zero(); len * 3 * dim];
    let mut ds = vec![T::zero(); len * len];
    for (h, p) in probs.chunks(len * len).enumerate() {
        let q = MatRef::window(qkv, 3 * dim, block.start, len, h * hd, hd);
        let k = MatRef::window(qkv, 3 * dim, block.start, len, dim + h * hd, hd);
        let v = MatRef::window(qkv, 3 * dim, block.start, len, 2 * dim + h * hd, hd);
        let d_o = MatRef::window(dout, dim, block.start, len, h * hd, hd);
        let pm = MatRef::new(p, len, len);
        // dV = Pᵀ dO
        gemm(T::one(), pm.t(), d_o, T::zero(), MatMut::window(&mut dqkv, 3 * dim, 0, len, 2 * dim + h * hd, hd));
        // dP = dO Vᵀ, then dS = P ⊙ (dP − rowsum(P ⊙ dP))
        gemm(T::one(), d_o, v.t(), T::zero(), MatMut::new(&mut ds, len, len));
        for (drow, prow) in ds.chunks_mut(len).zip(p.chunks(len)) {
            let dot: T = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
            for (d, &p) in drow.iter_mut().zip(prow) {
                *d = p * (*d - dot);
            }
        }
        let dsm = MatRef::new(&ds, len, len);
        gemm(scale, dsm, k, T::zero(), MatMut::window(&mut dqkv, 3 * dim, 0, len, h * hd, hd));
        gemm(scale, dsm.t(), q, T::zero(), MatMut::window(&mut dqkv, 3 * dim, 0, len, dim + h * hd, hd));
    }
    dqkv
}

/// Standalone multi-head attention over separate `q [n_q, D]`, `k`, `v
/// [n_k, D]` matrices. Output has the shape of `q`.
pub fn masked_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Tensor<T>> {
    let dim = q.cols();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Shape(format!("{heads} heads do not divide dimension {dim}")));
    }
    if k.cols() != dim || v.cols() != dim || k.rows() != v.rows() {
        return Err(Error::Shape("q, k and v dimensions disagree".into()));
    }
    if mask.n_q != q.rows() || mask.n_k != k.rows() {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match {} queries and {} keys",
            mask.n_q,
            mask.n_k,
            q.rows(),
            k.rows()
        )));
    }
    let (n_q, n_k) = (q.rows(), k.rows());
    let hd = dim / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut out = Tensor::zeros(q.shape());
    let mut probs = vec![T::zero(); n_q * n_k];
    for h in 0..heads {
        head_forward(
            MatRef::window(q.data(), dim, 0, n_q, h * hd, hd),
            MatRef::window(k.data(), dim, 0, n_k, h * hd, hd),
            MatRef::window(v.data(), dim, 0, n_k, h * hd, hd),
            mask,
            scale,
            &mut probs,
            MatMut::window(out.data_mut(), dim, 0, n_q, h * hd, hd),
        );
    }
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "masked_attention".into() });
    }
    Ok(out)
}
