//! Scaled dot-product attention, dense and ProbSparse.
//!
//! ProbSparse scores each query by `max_j s_ij - mean_j s_ij` over a random
//! sample of `c * ceil(ln L_K)` keys (drawn per query, with replacement),
//! computes exact attention rows only for the top `u = c * ceil(ln L_Q)`
//! queries, and fills the remaining rows with the mean of `V`.

use rand::Rng;

use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Which query rows receive exact attention. `All` is dense attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    All,
    Rows(Vec<usize>),
}

impl Selection {
    pub fn rows(&self, lq: usize) -> Vec<usize> {
        match self {
            Selection::All => (0..lq).collect(),
            Selection::Rows(r) => r.clone(),
        }
    }
}

fn log_budget(factor: usize, len: usize) -> usize {
    let l = (len as f64).ln().ceil().max(1.0) as usize;
    (factor * l).max(1)
}

/// Number of queries given exact rows: `min(L_Q, c * ceil(ln L_Q))`.
pub fn active_query_count(factor: usize, lq: usize) -> usize {
    log_budget(factor, lq).min(lq)
}

/// Keys sampled per query when scoring sparsity: `min(L_K, c * ceil(ln L_K))`.
pub fn key_sample_count(factor: usize, lk: usize) -> usize {
    log_budget(factor, lk).min(lk)
}

/// Chooses the top-`u` queries by the max-minus-mean sparsity measure.
pub(crate) fn select_queries<T: Real, R: Rng>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    factor: usize,
    rng: &mut R,
) -> Selection {
    let (lq, lk, d) = (q.rows, k.rows, q.cols);
    let u = active_query_count(factor, lq);
    if u >= lq {
        return Selection::All;
    }
    let samples = key_sample_count(factor, lk);
    let scale = 1.0 / (d as f64).sqrt();
    let mut scored: Vec<(f64, usize)> = (0..lq)
        .map(|i| {
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for _ in 0..samples {
                let j = rng.random_range(0..lk);
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q.data[q.offset + i * q.rs + c * q.cs].f64()
                        * k.data[k.offset + j * k.rs + c * k.cs].f64();
                }
                let s = dot * scale;
                max = max.max(s);
                sum += s;
            }
            (max - sum / samples as f64, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut rows: Vec<usize> = scored[..u].iter().map(|&(_, i)| i).collect();
    rows.sort_unstable();
    Selection::Rows(rows)
}

fn gather_rows<T: Real>(m: MatRef<'_, T>, rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * m.cols);
    for &r in rows {
        for c in 0..m.cols {
            out.push(m.data[m.offset + r * m.rs + c * m.cs]);
        }
    }
    out
}

fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_exact_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Forward pass of one head. Writes all `L_Q` output rows and returns the
/// attention probabilities of the selected rows (`u x L_K`, row-major).
pub(crate) fn head_forward<T: Real>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    sel: &Selection,
    out: MatMut<'_, T>,
) -> Vec<T> {
    let (lq, lk, dv) = (q.rows, k.rows, v.cols);
    let scale = T::of(1.0 / (q.cols as f64).sqrt());
    let rows = sel.rows(lq);
    let u = rows.len();
    let qs = gather_rows(q, &rows);
    let mut probs = vec![T::zero(); u * lk];
    gemm(scale, MatRef::dense(&qs, u, q.cols), k.t(), T::zero(), MatMut::dense(&mut probs, u, lk));
    softmax_rows(&mut probs, lk);
    let mut os = vec![T::zero(); u * dv];
    gemm(T::one(), MatRef::dense(&probs, u, lk), v, T::zero(), MatMut::dense(&mut os, u, dv));

    let MatMut { data, offset, rs, cs, .. } = out;
    if u < lq {
        let inv = T::one() / T::of(lk as f64);
        let mut mean = vec![T::zero(); dv];
        for j in 0..lk {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += v.data[v.offset + j * v.rs + c * v.cs];
            }
        }
        for m in &mut mean {
            *m *= inv;
        }
        for i in 0..lq {
            for (c, m) in mean.iter().enumerate() {
                data[offset + i * rs + c * cs] = *m;
            }
        }
    }
    for (n, &i) in rows.iter().enumerate() {
        for c in 0..dv {
            data[offset + i * rs + c * cs] = os[n * dv + c];
        }
    }
    probs
}

/// Backward pass of one head; accumulates into `dq`, `dk`, `dv` blocks.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_backward<T: Real>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    sel: &Selection,
    probs: &[T],
    d_out: MatRef<'_, T>,
    dq: Option<MatMut<'_, T>>,
    dk: Option<MatMut<'_, T>>,
    dvm: Option<MatMut<'_, T>>,
) {
    let (lq, lk, dvc, dk_c) = (q.rows, k.rows, v.cols, q.cols);
    let scale = T::of(1.0 / (dk_c as f64).sqrt());
    let rows = sel.rows(lq);
    let u = rows.len();
    let dos = gather_rows(d_out, &rows);

    if let Some(dvm) = dvm {
        let MatMut { data, offset, rows: dr, cols: dc, rs, cs } = dvm;
        gemm(
            T::one(),
            MatRef::dense(probs, u, lk).t(),
            MatRef::dense(&dos, u, dvc),
            T::one(),
            MatMut { data: &mut *data, offset, rows: dr, cols: dc, rs, cs },
        );
        if u < lq {
            let mut g = vec![T::zero(); dvc];
            let mut chosen = vec![false; lq];
            for &r in &rows {
                chosen[r] = true;
            }
            for i in (0..lq).filter(|&i| !chosen[i]) {
                for (c, gc) in g.iter_mut().enumerate() {
                    *gc += d_out.data[d_out.offset + i * d_out.rs + c * d_out.cs];
                }
            }
            let inv = T::one() / T::of(lk as f64);
            for j in 0..lk {
                for (c, gc) in g.iter().enumerate() {
                    data[offset + j * rs + c * cs] += *gc * inv;
                }
            }
        }
    }
    if dq.is_none() && dk.is_none() {
        return;
    }
    // dS = P * (dP - rowsum(dP * P)), dP = dO V^T
    let mut ds = vec![T::zero(); u * lk];
    gemm(T::one(), MatRef::dense(&dos, u, dvc), v.t(), T::zero(), MatMut::dense(&mut ds, u, lk));
    for (drow, prow) in ds.chunks_exact_mut(lk).zip(probs.chunks_exact(lk)) {
        let dot = drow.iter().zip(prow).fold(T::zero(), |a, (x, p)| a + *x * *p);
        for (x, p) in drow.iter_mut().zip(prow) {
            *x = *p * (*x - dot);
        }
    }
    if let Some(dq) = dq {
        let mut dqs = vec![T::zero(); u * dk_c];
        gemm(scale, MatRef::dense(&ds, u, lk), k, T::zero(), MatMut::dense(&mut dqs, u, dk_c));
        let MatMut { data, offset, rs, cs, .. } = dq;
        for (n, &i) in rows.iter().enumerate() {
            for c in 0..dk_c {
                data[offset + i * rs + c * cs] += dqs[n * dk_c + c];
            }
        }
    }
    if let Some(dk) = dk {
        let qs = gather_rows(q, &rows);
        gemm(scale, MatRef::dense(&ds, u, lk).t(), MatRef::dense(&qs, u, dk_c), T::one(), dk);
    }
}

fn check_shapes<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    let (lq, dq) = q.dims2();
    let (lk, dk) = k.dims2();
    let (lv, _) = v.dims2();
    if dq != dk || lk != lv || lq == 0 || lk == 0 || q.shape().len() != 2 {
        return Err(Error::shape(format!(
            "attention Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(d)) V`.
pub fn full_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    check_shapes(q, k, v)?;
    let (lq, _) = q.dims2();
    let dv = v.dims2().1;
    let mut out = vec![T::zero(); lq * dv];
    head_forward(q.mat(), k.mat(), v.mat(), &Selection::All, MatMut::dense(&mut out, lq, dv));
    Tensor::new(vec![lq, dv], out)
}

/// ProbSparse attention with sampling factor `factor`. Also returns the
/// query rows that received exact attention.
pub fn probsparse_attention<T: Real, R: Rng>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    factor: usize,
    rng: &mut R,
) -> Result<(Tensor<T>, Selection)> {
    check_shapes(q, k, v)?;
    let (lq, _) = q.dims2();
    let dv = v.dims2().1;
    let sel = select_queries(q.mat(), k.mat(), factor, rng);
    let mut out = vec![T::zero(); lq * dv];
    head_forward(q.mat(), k.mat(), v.mat(), &sel, MatMut::dense(&mut out, lq, dv));
    Ok((Tensor::new(vec![lq, dv], out)?, sel))
}
