use crate::error::{LmecError, Result};
use crate::kernels::{
    a_rpe_bias_terms, apply_activation, cosformer_phase_vectors, lm_ape_weights, m_ape_weights,
    PeKind, PeStyle,
};
use crate::numerics::Matrix;

use super::engine::{evaluate, product_flops, SimilarityTerm};
use super::{AttentionOutput, LinearAttentionSpec};

/// `softmax(QKᵀ/√d_k)V`, the quadratic reference.
pub fn softmax_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(LmecError::shape("softmax_attention", q.shape(), k.shape()));
    }
    if k.rows() != v.rows() {
        return Err(LmecError::shape("softmax_attention", k.shape(), v.shape()));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    q.matmul_transpose_b(k)?.scale(scale).softmax_rows().matmul(v)
}

/// Builds the factored similarity `Σ_t A_t B_tᵀ` for the spec's activation
/// and position embedding. Also returns the element-wise work spent on
/// feature maps and position weights, which is the same in both orders.
pub fn similarity_terms(
    q: &Matrix,
    k: &Matrix,
    spec: &LinearAttentionSpec,
) -> Result<(Vec<SimilarityTerm>, u64)> {
    if q.cols() != spec.d_k || k.cols() != spec.d_k {
        return Err(LmecError::shape(
            "similarity_terms",
            q.shape(),
            (k.rows(), spec.d_k),
        ));
    }
    if !matches!(spec.pe, PeStyle::Npe) && q.rows() != k.rows() {
        return Err(LmecError::shape("similarity_terms", q.shape(), k.shape()));
    }
    if let Some(w) = spec.pe.param_width() {
        if w != spec.d_k {
            return Err(LmecError::shape(
                "position parameters",
                (1, spec.d_k),
                (1, w),
            ));
        }
    }
    let n = k.rows();
    spec.pe.check_len(n)?;

    let psi_q = apply_activation(spec.activation, q);
    let psi_k = apply_activation(spec.activation, k);
    let nd = (n * spec.d_k) as u64;
    let features = (q.len() + k.len()) as u64;

    Ok(match &spec.pe {
        PeStyle::Npe => (vec![SimilarityTerm::new(psi_q, psi_k)], features),
        PeStyle::MRpe { max_len } => {
            let (cos, sin) = cosformer_phase_vectors(*max_len, n)?;
            let terms = vec![
                SimilarityTerm::new(psi_q.scale_rows(&cos)?, psi_k.scale_rows(&cos)?),
                SimilarityTerm::new(psi_q.scale_rows(&sin)?, psi_k.scale_rows(&sin)?),
            ];
            (terms, features + 4 * nd + 2 * n as u64)
        }
        PeStyle::MApe { w_ext, max_len } => {
            let weights = m_ape_weights(*max_len, n, w_ext)?;
            let key = psi_k.hadamard(&weights)?;
            (vec![SimilarityTerm::new(psi_q, key)], features + 2 * nd)
        }
        PeStyle::LmApe(table) => {
            let weights = lm_ape_weights(table, n)?;
            let key = psi_k.hadamard(&weights)?;
            (vec![SimilarityTerm::new(psi_q, key)], features + 2 * nd)
        }
        PeStyle::ARpe { max_len } => {
            let bias = a_rpe_bias_terms(*max_len, n)?;
            let terms = vec![
                SimilarityTerm::new(psi_q, psi_k),
                SimilarityTerm::new(
                    Matrix::column_vector(&bias.cos_q),
                    Matrix::column_vector(&bias.cos_k),
                ),
                SimilarityTerm::new(
                    Matrix::column_vector(&bias.sin_q),
                    Matrix::column_vector(&bias.sin_k),
                ),
            ];
            (terms, features + 2 * n as u64)
        }
    })
}

fn run(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &LinearAttentionSpec,
    expected: Option<PeKind>,
) -> Result<AttentionOutput> {
    if let Some(kind) = expected {
        let found = PeKind::from(&spec.pe);
        if found != kind {
            return Err(LmecError::WrongPeStyle {
                expected: kind.name(),
                found: found.name(),
            });
        }
    }
    let (terms, overhead) = similarity_terms(q, k, spec)?;
    let order = spec.resolve_order(k.rows());
    let values = evaluate(&terms, v, order, spec.normalize)?;
    let widths: Vec<usize> = terms.iter().map(SimilarityTerm::width).collect();
    let flops = product_flops(&widths, q.rows(), k.rows(), v.cols(), order, spec.normalize);
    Ok(AttentionOutput {
        values,
        resolved_order: order,
        flop_estimate: flops + overhead,
    })
}

/// Dispatches on the spec's position-embedding style.
pub fn linear_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &LinearAttentionSpec,
) -> Result<AttentionOutput> {
    run(q, k, v, spec, None)
}

/// Kernel attention with no position information.
pub fn npe_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &LinearAttentionSpec,
) -> Result<AttentionOutput> {
    run(q, k, v, spec, Some(PeKind::Npe))
}

/// cosFormer: `Q^cos(K^cosV) + Q^sin(K^sinV)`.
pub fn cosformer_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &LinearAttentionSpec,
) -> Result<AttentionOutput> {
    run(q, k, v, spec, Some(PeKind::MRpe))
}

/// Fixed multiplicative absolute weighting `cos(πj/2M)·w_ext` on keys.
pub fn mla_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &LinearAttentionSpec,
) -> Result<AttentionOutput> {
    run(q, k, v, spec, Some(PeKind::MApe))
}

/// Learnable multiplicative absolute weighting `ψ(K) ⊗ cos(R)`. A single
/// similarity term, where cosFormer needs two.
pub fn lmla_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &LinearAttentionSpec,
) -> Result<AttentionOutput> {
    run(q, k, v, spec, Some(PeKind::LmApe))
}

/// Kernel similarity plus the additive relative bias `cos(π(i−j)/2M)`.
pub fn a_rpe_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &LinearAttentionSpec,
) -> Result<AttentionOutput> {
    run(q, k, v, spec, Some(PeKind::ARpe))
}
