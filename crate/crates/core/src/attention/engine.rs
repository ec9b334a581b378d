//! Left- and right-product evaluation of a factored similarity.
//!
//! Every linear-attention variant reduces to a similarity of the form
//! `S = Σ_t A_t B_tᵀ` where `A_t` depends only on query positions and `B_t`
//! only on key positions. The left product materializes `S` (N×N); the
//! right product never does, contracting `B_tᵀV` first.

use crate::error::{LmecError, Result};
use crate::numerics::Matrix;

use super::ProductOrder;

/// One rank-`w` factor pair of a similarity matrix: `query · keyᵀ`.
#[derive(Clone, Debug)]
pub struct SimilarityTerm {
    pub query: Matrix,
    pub key: Matrix,
}

impl SimilarityTerm {
    pub fn new(query: Matrix, key: Matrix) -> Self {
        Self { query, key }
    }

    pub fn width(&self) -> usize {
        self.query.cols()
    }
}

fn validate(terms: &[SimilarityTerm], v: &Matrix) -> Result<(usize, usize)> {
    let first = terms
        .first()
        .ok_or_else(|| LmecError::Config("similarity needs at least one term".into()))?;
    let nq = first.query.rows();
    let nk = v.rows();
    for t in terms {
        if t.query.cols() != t.key.cols() {
            return Err(LmecError::shape("similarity term", t.query.shape(), t.key.shape()));
        }
        if t.query.rows() != nq {
            return Err(LmecError::shape("similarity term", first.query.shape(), t.query.shape()));
        }
        if t.key.rows() != nk {
            return Err(LmecError::shape("similarity term", t.key.shape(), v.shape()));
        }
    }
    Ok((nq, nk))
}

/// Evaluates `S·V` (optionally row-normalized by `S·1`) in the given order.
pub fn evaluate(
    terms: &[SimilarityTerm],
    v: &Matrix,
    order: ProductOrder,
    normalize: bool,
) -> Result<Matrix> {
    validate(terms, v)?;
    match order {
        ProductOrder::Left => evaluate_left(terms, v, normalize),
        ProductOrder::Right => evaluate_right(terms, v, normalize),
    }
}

/// The materialized `Nq × Nk` similarity `Σ_t A_t B_tᵀ`.
pub fn similarity_matrix(terms: &[SimilarityTerm]) -> Result<Matrix> {
    let mut iter = terms.iter();
    let first = iter
        .next()
        .ok_or_else(|| LmecError::Config("similarity needs at least one term".into()))?;
    let mut s = first.query.matmul_transpose_b(&first.key)?;
    for t in iter {
        s = s.add(&t.query.matmul_transpose_b(&t.key)?)?;
    }
    Ok(s)
}

fn divide_rows(mut out: Matrix, denominators: &[f64]) -> Result<Matrix> {
    for (row, &z) in denominators.iter().enumerate() {
        if z == 0.0 {
            return Err(LmecError::ZeroRowSum { row });
        }
        out.row_mut(row).iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

fn evaluate_left(terms: &[SimilarityTerm], v: &Matrix, normalize: bool) -> Result<Matrix> {
    let s = similarity_matrix(terms)?;
    let out = s.matmul(v)?;
    if normalize {
        divide_rows(out, &s.row_sums())
    } else {
        Ok(out)
    }
}

fn evaluate_right(terms: &[SimilarityTerm], v: &Matrix, normalize: bool) -> Result<Matrix> {
    let nq = terms[0].query.rows();
    let mut out = Matrix::zeros(nq, v.cols());
    let mut denominators = vec![0.0; nq];
    for t in terms {
        let kv = t.key.matmul_transpose_a(v)?;
        let contribution = t.query.matmul(&kv)?;
        for (o, c) in out.as_mut_slice().iter_mut().zip(contribution.as_slice()) {
            *o += c;
        }
        if normalize {
            let key_sums = t.key.col_sums();
            for (i, z) in denominators.iter_mut().enumerate() {
                *z += t
                    .query
                    .row(i)
                    .iter()
                    .zip(&key_sums)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
    }
    if normalize {
        divide_rows(out, &denominators)
    } else {
        Ok(out)
    }
}

/// `(q_prime · k_weightedᵀ) · V`, materializing the `N × N` similarity.
pub fn linear_attention_left(
    q_prime: &Matrix,
    k_weighted: &Matrix,
    v: &Matrix,
    normalize: bool,
) -> Result<Matrix> {
    let term = [SimilarityTerm::new(q_prime.clone(), k_weighted.clone())];
    evaluate(&term, v, ProductOrder::Left, normalize)
}

/// `q_prime · (k_weightedᵀ · V)`, never forming the `N × N` similarity.
pub fn linear_attention_right(
    q_prime: &Matrix,
    k_weighted: &Matrix,
    v: &Matrix,
    normalize: bool,
) -> Result<Matrix> {
    let term = [SimilarityTerm::new(q_prime.clone(), k_weighted.clone())];
    evaluate(&term, v, ProductOrder::Right, normalize)
}

/// Floating-point operation count of [`evaluate`] for terms of the given
/// widths. A multiply-add counts as two.
pub fn product_flops(
    widths: &[usize],
    nq: usize,
    nk: usize,
    d_v: usize,
    order: ProductOrder,
    normalize: bool,
) -> u64 {
    let (nq, nk, d_v) = (nq as u64, nk as u64, d_v as u64);
    let extra_terms = widths.len().saturating_sub(1) as u64;
    let widths = widths.iter().map(|&w| w as u64);
    match order {
        ProductOrder::Left => {
            let similarity: u64 = widths.map(|w| 2 * nq * nk * w).sum::<u64>() + extra_terms * nq * nk;
            let apply = 2 * nq * nk * d_v;
            let norm = if normalize { nq * nk + nq * d_v } else { 0 };
            similarity + apply + norm
        }
        ProductOrder::Right => {
            let mut total = extra_terms * nq * d_v;
            let mut norm = 0;
            for w in widths {
                total += 2 * nk * w * d_v + 2 * nq * w * d_v;
                norm += nk * w + 2 * nq * w;
            }
            if normalize {
                total += norm + extra_terms * nq + nq * d_v;
            }
            total
        }
    }
}
