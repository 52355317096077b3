//! Scaled dot-product attention, `Softmax(Q K^T / sqrt(d_k)) V`, and its
//! multi-head wrapper.

use alloc::vec;
use alloc::vec::Vec;

use super::layers::{linear, linear_backward};
use super::params::{AttnLayout, Parameters};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::real::Real;

/// Which keys each query row may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    None,
    /// Row `i` sees keys `0..=i`.
    Causal,
    /// Row-major `m x n`; `true` means allowed.
    Explicit(Vec<bool>),
}

impl AttnMask {
    #[inline]
    fn allowed(&self, i: usize, j: usize, n: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal => j <= i,
            AttnMask::Explicit(m) => m[i * n + j],
        }
    }

    /// Exclusive upper bound of keys worth visiting for row `i`.
    #[inline]
    fn horizon(&self, i: usize, n: usize) -> usize {
        match self {
            AttnMask::Causal => (i + 1).min(n),
            _ => n,
        }
    }

    fn check(&self, m: usize, n: usize) -> Result<()> {
        if let AttnMask::Explicit(mask) = self {
            if mask.len() != m * n {
                return Err(Error::Shape {
                    context: "attention mask",
                    expected: m * n,
                    actual: mask.len(),
                });
            }
        }
        for i in 0..m {
            if !(0..self.horizon(i, n)).any(|j| self.allowed(i, j, n)) {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnOutput<T> {
    pub output: Mat<T>,
    /// Row-stochastic `m x n` attention weights; disallowed entries are 0.
    pub weights: Mat<T>,
}

/// Single-head attention on contiguous `m x dk` / `n x dk` buffers.
/// Returns `(output m x dk, weights m x n)`.
fn attend<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    m: usize,
    n: usize,
    dk: usize,
    mask: &AttnMask,
) -> (Vec<T>, Vec<T>) {
    let scale = T::ONE / T::from_usize(dk).sqrt();
    let mut probs = vec![T::ZERO; m * n];
    let mut out = vec![T::ZERO; m * dk];
    for i in 0..m {
        let qi = &q[i * dk..(i + 1) * dk];
        let hz = mask.horizon(i, n);
        let row = &mut probs[i * n..(i + 1) * n];
        let mut max: Option<T> = None;
        for j in 0..hz {
            if mask.allowed(i, j, n) {
                let s = crate::mat::dot(qi, &k[j * dk..(j + 1) * dk]) * scale;
                row[j] = s;
                max = Some(match max {
                    Some(mx) => mx.max(s),
                    None => s,
                });
            }
        }
        let max = max.unwrap_or(T::ZERO);
        let mut sum = T::ZERO;
        for j in 0..hz {
            if mask.allowed(i, j, n) {
                let e = (row[j] - max).exp();
                row[j] = e;
                sum += e;
            }
        }
        let o = &mut out[i * dk..(i + 1) * dk];
        for j in 0..hz {
            if mask.allowed(i, j, n) {
                let p = row[j] / sum;
                row[j] = p;
                for (ov, &vv) in o.iter_mut().zip(&v[j * dk..(j + 1) * dk]) {
                    *ov += p * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Plain attention. `mask`, when given, is row-major `m x n` with `true`
/// marking allowed entries.
pub fn attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    mask: Option<&[bool]>,
) -> Result<AttnOutput<T>> {
    if q.cols != k.cols {
        return Err(Error::Shape {
            context: "attention key width",
            expected: q.cols,
            actual: k.cols,
        });
    }
    if k.rows != v.rows {
        return Err(Error::Shape {
            context: "attention value rows",
            expected: k.rows,
            actual: v.rows,
        });
    }
    if v.cols != q.cols {
        return Err(Error::Shape {
            context: "attention value width",
            expected: q.cols,
            actual: v.cols,
        });
    }
    let mask = match mask {
        Some(m) => AttnMask::Explicit(m.to_vec()),
        None => AttnMask::None,
    };
    let (m, n, dk) = (q.rows, k.rows, q.cols);
    mask.check(m, n)?;
    let (out, probs) = attend(&q.data, &k.data, &v.data, m, n, dk, &mask);
    Ok(AttnOutput {
        output: Mat::from_vec(m, dk, out)?,
        weights: Mat::from_vec(m, n, probs)?,
    })
}

pub(crate) struct MhaCache<T> {
    xq: Vec<T>,
    xk: Vec<T>,
    xv: Vec<T>,
    m: usize,
    n: usize,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Per head, `m x n`.
    probs: Vec<Vec<T>>,
    concat: Vec<T>,
    mask: AttnMask,
}

impl<T: Real> MhaCache<T> {
    pub(crate) fn head_weights(&self, h: usize) -> &[T] {
        &self.probs[h]
    }
}

fn head_cols<T: Real>(x: &[T], rows: usize, d: usize, h: usize, dk: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * dk);
    for r in 0..rows {
        out.extend_from_slice(&x[r * d + h * dk..r * d + (h + 1) * dk]);
    }
    out
}

fn scatter_head<T: Real>(dst: &mut [T], src: &[T], rows: usize, d: usize, h: usize, dk: usize) {
    for r in 0..rows {
        for c in 0..dk {
            dst[r * d + h * dk + c] += src[r * dk + c];
        }
    }
}

/// Multi-head attention over separate query, key and value sources.
/// `xq` is `m x d`; `xk` and `xv` are `n x d`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mha_forward<T: Real>(
    p: &Parameters<T>,
    l: &AttnLayout,
    heads: usize,
    d: usize,
    xq: &[T],
    m: usize,
    xk: &[T],
    xv: &[T],
    n: usize,
    mask: AttnMask,
) -> Result<(Vec<T>, MhaCache<T>)> {
    mask.check(m, n)?;
    let dk = d / heads;
    let q = linear(xq, m, p.get(l.wq), p.get(l.bq), d, d);
    let k = linear(xk, n, p.get(l.wk), p.get(l.bk), d, d);
    let v = linear(xv, n, p.get(l.wv), p.get(l.bv), d, d);
    let mut concat = vec![T::ZERO; m * d];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (o, pr) = attend(
            &head_cols(&q, m, d, h, dk),
            &head_cols(&k, n, d, h, dk),
            &head_cols(&v, n, d, h, dk),
            m,
            n,
            dk,
            &mask,
        );
        scatter_head(&mut concat, &o, m, d, h, dk);
        probs.push(pr);
    }
    let out = linear(&concat, m, p.get(l.wo), p.get(l.bo), d, d);
    Ok((
        out,
        MhaCache {
            xq: xq.to_vec(),
            xk: xk.to_vec(),
            xv: xv.to_vec(),
            m,
            n,
            q,
            k,
            v,
            probs,
            concat,
            mask,
        },
    ))
}

/// Returns gradients with respect to the query, key and value sources.
pub(crate) fn mha_backward<T: Real>(
    p: &Parameters<T>,
    g: &mut Parameters<T>,
    l: &AttnLayout,
    heads: usize,
    d: usize,
    c: &MhaCache<T>,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (m, n) = (c.m, c.n);
    let dk = d / heads;
    let scale = T::ONE / T::from_usize(dk).sqrt();

    let dconcat = {
        let (dw, db) = two_mut(g, l.wo, l.bo);
        linear_backward(&c.concat, dout, m, p.get(l.wo), d, d, dw, db)
    };

    let mut dq = vec![T::ZERO; m * d];
    let mut dk_all = vec![T::ZERO; n * d];
    let mut dv = vec![T::ZERO; n * d];
    for h in 0..heads {
        let qh = head_cols(&c.q, m, d, h, dk);
        let kh = head_cols(&c.k, n, d, h, dk);
        let vh = head_cols(&c.v, n, d, h, dk);
        let doh = head_cols(&dconcat, m, d, h, dk);
        let pr = &c.probs[h];
        let mut dqh = vec![T::ZERO; m * dk];
        let mut dkh = vec![T::ZERO; n * dk];
        let mut dvh = vec![T::ZERO; n * dk];
        let mut dp = vec![T::ZERO; n];
        for i in 0..m {
            let hz = c.mask.horizon(i, n);
            let doi = &doh[i * dk..(i + 1) * dk];
            let mut rowdot = T::ZERO;
            for j in 0..hz {
                let pij = pr[i * n + j];
                if pij == T::ZERO {
                    dp[j] = T::ZERO;
                    continue;
                }
                let vj = &vh[j * dk..(j + 1) * dk];
                dp[j] = crate::mat::dot(doi, vj);
                rowdot += pij * dp[j];
                for (dvv, &g) in dvh[j * dk..(j + 1) * dk].iter_mut().zip(doi) {
                    *dvv += pij * g;
                }
            }
            let qi = &qh[i * dk..(i + 1) * dk];
            for j in 0..hz {
                let pij = pr[i * n + j];
                if pij == T::ZERO {
                    continue;
                }
                let ds = pij * (dp[j] - rowdot) * scale;
                let kj = &kh[j * dk..(j + 1) * dk];
                for (dqv, &kv) in dqh[i * dk..(i + 1) * dk].iter_mut().zip(kj) {
                    *dqv += ds * kv;
                }
                for (dkv, &qv) in dkh[j * dk..(j + 1) * dk].iter_mut().zip(qi) {
                    *dkv += ds * qv;
                }
            }
        }
        scatter_head(&mut dq, &dqh, m, d, h, dk);
        scatter_head(&mut dk_all, &dkh, n, d, h, dk);
        scatter_head(&mut dv, &dvh, n, d, h, dk);
    }

    let dxq = {
        let (dw, db) = two_mut(g, l.wq, l.bq);
        linear_backward(&c.xq, &dq, m, p.get(l.wq), d, d, dw, db)
    };
    let dxk = {
        let (dw, db) = two_mut(g, l.wk, l.bk);
        linear_backward(&c.xk, &dk_all, n, p.get(l.wk), d, d, dw, db)
    };
    let dxv = {
        let (dw, db) = two_mut(g, l.wv, l.bv);
        linear_backward(&c.xv, &dv, n, p.get(l.wv), d, d, dw, db)
    };
    (dxq, dxk, dxv)
}

/// Disjoint mutable views of two parameter tensors; `a` must precede `b`.
pub(crate) fn two_mut<T: Real>(
    g: &mut Parameters<T>,
    a: super::params::Span,
    b: super::params::Span,
) -> (&mut [T], &mut [T]) {
    debug_assert!(a.offset + a.len() <= b.offset);
    let (lo, hi) = g.values.split_at_mut(b.offset);
    (&mut lo[a.range()], &mut hi[..b.len()])
}

/// Multi-head attention with the given layer's weights. `x_q` is
/// `m x d_model`, `x_kv` is `n x d_model`.
pub fn multi_head<T: Real>(
    x_q: &Mat<T>,
    x_kv: &Mat<T>,
    params: &Parameters<T>,
    layer: &AttnLayout,
    n_heads: usize,
    mask: AttnMask,
) -> Result<Mat<T>> {
    let d = x_q.cols;
    if x_kv.cols != d {
        return Err(Error::Shape {
            context: "multi-head key/value width",
            expected: d,
            actual: x_kv.cols,
        });
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config("model.n_heads", "must divide d_model"));
    }
    if layer.wq.rows != d {
        return Err(Error::Shape {
            context: "multi-head projection",
            expected: layer.wq.rows,
            actual: d,
        });
    }
    let (out, _) = mha_forward(
        params, layer, n_heads, d, &x_q.data, x_q.rows, &x_kv.data, &x_kv.data, x_kv.rows, mask,
    )?;
    Mat::from_vec(x_q.rows, d, out)
}
