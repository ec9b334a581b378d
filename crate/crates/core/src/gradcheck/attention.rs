use crate::attention::{
    check_heads, linear_attention, similarity_matrix, similarity_terms, AttentionProjections, LinearAttentionSpec, OrderPolicy,
    ProductOrder, SimilarityTerm,
};
use crate::error::{LmecError, Result};
use crate::kernels::{
    cosformer_phase_vectors, lm_ape_weights, m_ape_weights, position_phase, PeStyle,
};
use crate::numerics::Matrix;

/// Gradients of `Σ upstream ⊙ attention(q, k, v)` for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Same shape as the style's learnable tensor (LM-APE table or M-APE
    /// extension row); `None` for styles without one.
    pub pe: Option<Matrix>,
}

/// Gradients of `Σ upstream ⊙ multi_head(x_q, x_k, x_v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadGrads {
    pub x_q: Matrix,
    pub x_k: Matrix,
    pub x_v: Matrix,
    /// Gradient for each projection, in the same layout as the parameters.
    pub projections: AttentionProjections,
    pub pe: Option<Matrix>,
}

fn outer(col: &[f64], row: &[f64]) -> Matrix {
    Matrix::from_fn(col.len(), row.len(), |i, j| col[i] * row[j])
}

fn row_matrix(values: Vec<f64>) -> Matrix {
    Matrix::row_vector(&values)
}

/// Upstream gradient split into the numerator part `dU` and the
/// denominator part `dz` for `O = U / z`. Without normalization `dz` is
/// empty and `dU = G`.
fn split_normalization(
    numerator: &Matrix,
    denominators: Option<&[f64]>,
    upstream: &Matrix,
) -> Result<(Matrix, Vec<f64>)> {
    let Some(z) = denominators else {
        return Ok((upstream.clone(), Vec::new()));
    };
    let mut du = upstream.clone();
    let mut dz = vec![0.0; z.len()];
    for (i, &zi) in z.iter().enumerate() {
        if zi == 0.0 {
            return Err(LmecError::ZeroRowSum { row: i });
        }
        // O = U/z, so ∂/∂z_i of Σ_c G_ic U_ic / z_i is −Σ_c G_ic U_ic / z_i².
        dz[i] = -upstream
            .row(i)
            .iter()
            .zip(numerator.row(i))
            .map(|(g, u)| g * u)
            .sum::<f64>()
            / (zi * zi);
        du.row_mut(i).iter_mut().for_each(|g| *g /= zi);
    }
    Ok((du, dz))
}

type TermGrads = (Vec<(Matrix, Matrix)>, Matrix);

/// Backward through `(Σ_t A_t B_tᵀ)·V`, materializing the similarity.
fn terms_backward_left(
    terms: &[SimilarityTerm],
    v: &Matrix,
    normalize: bool,
    upstream: &Matrix,
) -> Result<TermGrads> {
    let s = similarity_matrix(terms)?;
    let u = s.matmul(v)?;
    let z = normalize.then(|| s.row_sums());
    let (du, dz) = split_normalization(&u, z.as_deref(), upstream)?;

    let mut ds = du.matmul_transpose_b(v)?;
    if normalize {
        for (i, &g) in dz.iter().enumerate() {
            ds.row_mut(i).iter_mut().for_each(|x| *x += g);
        }
    }
    let dv = s.matmul_transpose_a(&du)?;
    let per_term = terms
        .iter()
        .map(|t| Ok((ds.matmul(&t.key)?, ds.matmul_transpose_a(&t.query)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((per_term, dv))
}

/// Backward through `Σ_t A_t(B_tᵀV)`, never forming the similarity.
fn terms_backward_right(
    terms: &[SimilarityTerm],
    v: &Matrix,
    normalize: bool,
    upstream: &Matrix,
) -> Result<TermGrads> {
    let nq = terms[0].query.rows();
    let kvs = terms
        .iter()
        .map(|t| t.key.matmul_transpose_a(v))
        .collect::<Result<Vec<_>>>()?;
    let key_sums: Vec<Vec<f64>> = terms.iter().map(|t| t.key.col_sums()).collect();

    let mut u = Matrix::zeros(nq, v.cols());
    let mut z = vec![0.0; nq];
    for ((t, kv), ks) in terms.iter().zip(&kvs).zip(&key_sums) {
        u = u.add(&t.query.matmul(kv)?)?;
        for (i, zi) in z.iter_mut().enumerate() {
            *zi += t.query.row(i).iter().zip(ks).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let (du, dz) = split_normalization(&u, normalize.then_some(z.as_slice()), upstream)?;

    let mut dv = Matrix::zeros(v.rows(), v.cols());
    let mut per_term = Vec::with_capacity(terms.len());
    for ((t, kv), ks) in terms.iter().zip(&kvs).zip(&key_sums) {
        let mut da = du.matmul_transpose_b(kv)?;
        let dkv = t.query.matmul_transpose_a(&du)?;
        let mut db = v.matmul_transpose_b(&dkv)?;
        if normalize {
            da = da.add(&outer(&dz, ks))?;
            let dks = Matrix::column_vector(&dz).matmul_transpose_a(&t.query)?;
            db = db.broadcast_row_add(&dks)?;
        }
        dv = dv.add(&t.key.matmul(&dkv)?)?;
        per_term.push((da, db));
    }
    Ok((per_term, dv))
}

/// Gradients of one attention head for upstream gradient `upstream`, using
/// the backward pass of `order`. The spec's own order policy is ignored.
pub fn backward_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &LinearAttentionSpec,
    order: ProductOrder,
    upstream: &Matrix,
) -> Result<AttentionGrads> {
    let (terms, _) = similarity_terms(q, k, spec)?;
    if v.rows() != k.rows() {
        return Err(LmecError::shape("backward_attention", k.shape(), v.shape()));
    }
    if upstream.shape() != (q.rows(), v.cols()) {
        return Err(LmecError::shape(
            "backward_attention upstream",
            (q.rows(), v.cols()),
            upstream.shape(),
        ));
    }
    let (term_grads, dv) = match order {
        ProductOrder::Left => terms_backward_left(&terms, v, spec.normalize, upstream)?,
        ProductOrder::Right => terms_backward_right(&terms, v, spec.normalize, upstream)?,
    };

    let n = k.rows();
    let act = spec.activation;
    let psi_k = k.map(|x| act.eval(x));
    let (da0, db0) = &term_grads[0];
    let (d_psi_q, d_psi_k, d_pe) = match &spec.pe {
        PeStyle::Npe | PeStyle::ARpe { .. } => (da0.clone(), db0.clone(), None),
        PeStyle::MRpe { max_len } => {
            let (cos, sin) = cosformer_phase_vectors(*max_len, n)?;
            let (da1, db1) = &term_grads[1];
            (
                da0.scale_rows(&cos)?.add(&da1.scale_rows(&sin)?)?,
                db0.scale_rows(&cos)?.add(&db1.scale_rows(&sin)?)?,
                None,
            )
        }
        PeStyle::MApe { w_ext, max_len } => {
            let weights = m_ape_weights(*max_len, n, w_ext)?;
            let d_weights = db0.hadamard(&psi_k)?;
            let mut dw = vec![0.0; w_ext.cols()];
            for j in 0..n {
                let c = position_phase(j, *max_len).cos();
                for (acc, g) in dw.iter_mut().zip(d_weights.row(j)) {
                    *acc += c * g;
                }
            }
            (da0.clone(), db0.hadamard(&weights)?, Some(row_matrix(dw)))
        }
        PeStyle::LmApe(table) => {
            let weights = lm_ape_weights(table, n)?;
            let r = table.matrix();
            // rows at or beyond n never enter the forward pass
            let dr = Matrix::from_fn(r.rows(), r.cols(), |j, c| {
                if j < n {
                    -db0.get(j, c) * psi_k.get(j, c) * r.get(j, c).sin()
                } else {
                    0.0
                }
            });
            (da0.clone(), db0.hadamard(&weights)?, Some(dr))
        }
    };
    let chain = |x: &Matrix, d_psi: &Matrix| {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| d_psi.get(i, j) * act.derivative(x.get(i, j)))
    };
    Ok(AttentionGrads {
        q: chain(q, &d_psi_q),
        k: chain(k, &d_psi_k),
        v: dv,
        pe: d_pe,
    })
}

fn with_order(spec: &LinearAttentionSpec, order: ProductOrder) -> LinearAttentionSpec {
    LinearAttentionSpec {
        order: OrderPolicy::from(order),
        ..spec.clone()
    }
}

/// Gradients of the projected multi-head layer, every head differentiated
/// with the backward pass of `order`.
pub fn backward_multi_head(
    x_q: &Matrix,
    x_k: &Matrix,
    x_v: &Matrix,
    spec: &LinearAttentionSpec,
    proj: &AttentionProjections,
    order: ProductOrder,
    upstream: &Matrix,
) -> Result<MultiHeadGrads> {
    let d = proj.model_dim();
    check_heads(d, spec)?;
    let q = x_q.matmul(&proj.w_q)?.broadcast_row_add(&proj.b_q)?;
    let k = x_k.matmul(&proj.w_k)?.broadcast_row_add(&proj.b_k)?;
    let v = x_v.matmul(&proj.w_v)?.broadcast_row_add(&proj.b_v)?;
    if upstream.shape() != (q.rows(), d) {
        return Err(LmecError::shape("backward_multi_head upstream", (q.rows(), d), upstream.shape()));
    }
    let d_k = spec.d_k;
    let d_concat = upstream.matmul_transpose_b(&proj.w_o)?;

    let mut heads_out = Vec::with_capacity(spec.heads);
    let (mut dq, mut dk, mut dv, mut dpe) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for h in 0..spec.heads {
        let (s, e) = (h * d_k, (h + 1) * d_k);
        let head_spec = with_order(&spec.head(h), order);
        let (qh, kh, vh) = (q.column_block(s, e), k.column_block(s, e), v.column_block(s, e));
        heads_out.push(linear_attention(&qh, &kh, &vh, &head_spec)?.values);
        let g = backward_attention(&qh, &kh, &vh, &head_spec, order, &d_concat.column_block(s, e))?;
        dq.push(g.q);
        dk.push(g.k);
        dv.push(g.v);
        dpe.extend(g.pe);
    }
    let concat = Matrix::hstack(&heads_out)?;
    let (dq, dk, dv) = (Matrix::hstack(&dq)?, Matrix::hstack(&dk)?, Matrix::hstack(&dv)?);
    let bias = |g: &Matrix| row_matrix(g.col_sums());

    Ok(MultiHeadGrads {
        x_q: dq.matmul_transpose_b(&proj.w_q)?,
        x_k: dk.matmul_transpose_b(&proj.w_k)?,
        x_v: dv.matmul_transpose_b(&proj.w_v)?,
        projections: AttentionProjections {
            w_q: x_q.matmul_transpose_a(&dq)?,
            b_q: bias(&dq),
            w_k: x_k.matmul_transpose_a(&dk)?,
            b_k: bias(&dk),
            w_v: x_v.matmul_transpose_a(&dv)?,
            b_v: bias(&dv),
            w_o: concat.matmul_transpose_a(upstream)?,
            b_o: bias(upstream),
        },
        pe: if dpe.is_empty() { None } else { Some(Matrix::hstack(&dpe)?) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, weighted_sum};
    use crate::kernels::{ActivationKind, PeKind};
    use crate::numerics::Rng;

    fn spec(activation: ActivationKind, pe: PeStyle, d_k: usize) -> LinearAttentionSpec {
        LinearAttentionSpec {
            activation,
            pe,
            order: OrderPolicy::Right,
            normalize: true,
            d_k,
            heads: 1,
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(0);
        for kind in PeKind::ALL {
            let s = spec(ActivationKind::Sigmoid, kind.instantiate(8, 3, &mut rng), 3);
            let (q, k, v) = (rng.normal_matrix(6, 3, 1.0), rng.normal_matrix(6, 3, 1.0), rng.normal_matrix(6, 3, 1.0));
            for order in [ProductOrder::Left, ProductOrder::Right] {
                let g = backward_attention(&q, &k, &v, &s, order, &Matrix::zeros(6, 3)).unwrap();
                assert_eq!(g.q, Matrix::zeros(6, 3));
                assert_eq!(g.k, Matrix::zeros(6, 3));
                assert_eq!(g.v, Matrix::zeros(6, 3));
                if let Some(pe) = g.pe {
                    assert_eq!(pe.max_abs(), 0.0);
                }
            }
        }
    }

    #[test]
    fn lm_ape_rows_past_sequence_get_no_gradient() {
        let mut rng = Rng::new(1);
        let s = spec(ActivationKind::EluPlusOne, PeKind::LmApe.instantiate(10, 3, &mut rng), 3);
        let (q, k, v) = (rng.normal_matrix(4, 3, 1.0), rng.normal_matrix(4, 3, 1.0), rng.normal_matrix(4, 3, 1.0));
        let g = rng.normal_matrix(4, 3, 1.0);
        for order in [ProductOrder::Left, ProductOrder::Right] {
            let dr = backward_attention(&q, &k, &v, &s, order, &g).unwrap().pe.unwrap();
            assert_eq!(dr.shape(), (10, 3));
            assert!(dr.top_rows(4).max_abs() > 0.0);
            for j in 4..10 {
                assert!(dr.row(j).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn lmla_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let s = spec(ActivationKind::Sigmoid, PeKind::LmApe.instantiate(8, 3, &mut rng), 3);
        let (q, k, v) = (rng.normal_matrix(6, 3, 1.0), rng.normal_matrix(6, 3, 1.0), rng.normal_matrix(6, 3, 1.0));
        let g = rng.normal_matrix(6, 3, 1.0);
        let loss = |q: &Matrix| weighted_sum(&linear_attention(q, &k, &v, &s)?.values, &g);
        let numeric = finite_diff_grad(loss, &q, 1e-5).unwrap();
        let analytic = backward_attention(&q, &k, &v, &s, ProductOrder::Right, &g).unwrap().q;
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            assert!(crate::gradcheck::relative_error(*a, *n) < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn single_active_feature_gives_vanishing_query_gradient() {
        // With one positive query feature the normalized row is invariant to
        // that feature's scale.
        let mut rng = Rng::new(3);
        let s = spec(ActivationKind::Relu, PeStyle::Npe, 3);
        let q = Matrix::from_rows(&[[0.7, -1.0, -0.2], [0.3, 0.4, 0.5]]).unwrap();
        let (k, v) = (rng.uniform_matrix(4, 3, 0.1, 1.0), rng.normal_matrix(4, 3, 1.0));
        let g = rng.normal_matrix(2, 3, 1.0);
        for order in [ProductOrder::Left, ProductOrder::Right] {
            let dq = backward_attention(&q, &k, &v, &s, order, &g).unwrap().q;
            assert!(dq.get(0, 0).abs() < 1e-15);
            assert_eq!(dq.get(0, 1), 0.0);
            assert!(dq.row(1).iter().all(|x| x.abs() > 1e-6));
        }
    }

    #[test]
    fn shapes_and_errors() {
        let mut rng = Rng::new(4);
        let s = spec(ActivationKind::Sigmoid, PeStyle::Npe, 3);
        let (q, k, v) = (rng.normal_matrix(2, 3, 1.0), rng.normal_matrix(5, 3, 1.0), rng.normal_matrix(5, 4, 1.0));
        let g = backward_attention(&q, &k, &v, &s, ProductOrder::Left, &Matrix::ones(2, 4)).unwrap();
        assert_eq!((g.q.shape(), g.k.shape(), g.v.shape()), ((2, 3), (5, 3), (5, 4)));
        assert!(g.pe.is_none());
        assert!(backward_attention(&q, &k, &v, &s, ProductOrder::Left, &Matrix::ones(2, 3)).is_err());
        assert!(backward_attention(&q, &k, &v.top_rows(4), &s, ProductOrder::Right, &Matrix::ones(2, 4)).is_err());
    }

    #[test]
    fn multi_head_grad_shapes() {
        let mut rng = Rng::new(5);
        let pe = PeKind::MApe.instantiate(8, 6, &mut rng);
        let s = LinearAttentionSpec { heads: 2, ..spec(ActivationKind::TanhShift, pe, 3) };
        let proj = AttentionProjections::random(6, &mut rng);
        let x = rng.normal_matrix(5, 6, 1.0);
        let g = backward_multi_head(&x, &x, &x, &s, &proj, ProductOrder::Left, &Matrix::ones(5, 6)).unwrap();
        for ((_, grad), (_, param)) in g.projections.tensors().iter().zip(proj.tensors()) {
            assert_eq!(grad.shape(), param.shape());
        }
        assert_eq!(g.pe.unwrap().shape(), (1, 6));
        assert_eq!(g.x_q.shape(), (5, 6));
    }
}
