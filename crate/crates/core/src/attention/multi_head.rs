use crate::error::{LmecError, Result};
use crate::numerics::{Matrix, Rng};

use super::variants::linear_attention;
use super::{AttentionOutput, LinearAttentionSpec};

/// Query/key/value/output projections of one attention layer, each with a
/// bias row.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProjections {
    pub w_q: Matrix,
    pub b_q: Matrix,
    pub w_k: Matrix,
    pub b_k: Matrix,
    pub w_v: Matrix,
    pub b_v: Matrix,
    pub w_o: Matrix,
    pub b_o: Matrix,
}

impl AttentionProjections {
    /// Weights `N(0, 1/d_model)`, zero biases.
    pub fn random(d_model: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        let mut w = || rng.normal_matrix(d_model, d_model, std);
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let b = || Matrix::zeros(1, d_model);
        Self {
            w_q,
            b_q: b(),
            w_k,
            b_k: b(),
            w_v,
            b_v: b(),
            w_o,
            b_o: b(),
        }
    }

    pub fn zeros(d_model: usize) -> Self {
        let w = || Matrix::zeros(d_model, d_model);
        let b = || Matrix::zeros(1, d_model);
        Self {
            w_q: w(),
            b_q: b(),
            w_k: w(),
            b_k: b(),
            w_v: w(),
            b_v: b(),
            w_o: w(),
            b_o: b(),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 8] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 8] {
        [
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }
}

pub(crate) fn check_heads(model_dim: usize, spec: &LinearAttentionSpec) -> Result<()> {
    if spec.heads == 0 || !model_dim.is_multiple_of(spec.heads) {
        return Err(LmecError::IndivisibleHeads {
            model_dim,
            heads: spec.heads,
        });
    }
    if model_dim / spec.heads != spec.d_k {
        return Err(LmecError::Config(format!(
            "model dimension {model_dim} over {} heads gives head dimension {}, spec says {}",
            spec.heads,
            model_dim / spec.heads,
            spec.d_k
        )));
    }
    Ok(())
}

/// Splits already-projected `q`, `k`, `v` into `spec.heads` column blocks,
/// runs the spec'd attention on each and concatenates the results. Flop
/// estimates are summed over heads.
pub fn attention_heads(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    spec: &LinearAttentionSpec,
) -> Result<AttentionOutput> {
    check_heads(q.cols(), spec)?;
    if k.cols() != q.cols() {
        return Err(LmecError::shape("attention_heads", q.shape(), k.shape()));
    }
    if !v.cols().is_multiple_of(spec.heads) {
        return Err(LmecError::IndivisibleHeads {
            model_dim: v.cols(),
            heads: spec.heads,
        });
    }
    let d_v = v.cols() / spec.heads;
    let mut outputs = Vec::with_capacity(spec.heads);
    let mut flops = 0;
    let mut resolved = spec.resolve_order(k.rows());
    for h in 0..spec.heads {
        let (qs, qe) = (h * spec.d_k, (h + 1) * spec.d_k);
        let head = linear_attention(
            &q.column_block(qs, qe),
            &k.column_block(qs, qe),
            &v.column_block(h * d_v, (h + 1) * d_v),
            &spec.head(h),
        )?;
        flops += head.flop_estimate;
        resolved = head.resolved_order;
        outputs.push(head.values);
    }
    Ok(AttentionOutput {
        values: Matrix::hstack(&outputs)?,
        resolved_order: resolved,
        flop_estimate: flops,
    })
}

/// Projects, attends per head, concatenates and applies the output
/// projection.
pub fn multi_head(
    x_q: &Matrix,
    x_k: &Matrix,
    x_v: &Matrix,
    spec: &LinearAttentionSpec,
    proj: &AttentionProjections,
) -> Result<Matrix> {
    check_heads(proj.model_dim(), spec)?;
    let q = x_q.matmul(&proj.w_q)?.broadcast_row_add(&proj.b_q)?;
    let k = x_k.matmul(&proj.w_k)?.broadcast_row_add(&proj.b_k)?;
    let v = x_v.matmul(&proj.w_v)?.broadcast_row_add(&proj.b_v)?;
    let heads = attention_heads(&q, &k, &v, spec)?;
    heads.values.matmul(&proj.w_o)?.broadcast_row_add(&proj.b_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{OrderPolicy, ProductOrder};
    use crate::kernels::{ActivationKind, LearnablePositionTable, PeStyle};

    fn spec(pe: PeStyle, heads: usize, d_k: usize) -> LinearAttentionSpec {
        LinearAttentionSpec {
            activation: ActivationKind::EluPlusOne,
            pe,
            order: OrderPolicy::Right,
            normalize: true,
            d_k,
            heads,
        }
    }

    #[test]
    fn single_head_matches_direct_path() {
        let mut rng = Rng::new(0);
        let x = rng.normal_matrix(7, 6, 1.0);
        let proj = AttentionProjections::random(6, &mut rng);
        let table = LearnablePositionTable::random(8, 6, &mut rng);
        let s = spec(PeStyle::LmApe(table), 1, 6);
        let out = multi_head(&x, &x, &x, &s, &proj).unwrap();

        let q = x.matmul(&proj.w_q).unwrap();
        let k = x.matmul(&proj.w_k).unwrap();
        let v = x.matmul(&proj.w_v).unwrap();
        let direct = linear_attention(&q, &k, &v, &s).unwrap().values.matmul(&proj.w_o).unwrap();
        assert!(out.max_abs_diff(&direct).unwrap() < 1e-14);
    }

    #[test]
    fn model_256_with_4_heads_gives_64_wide_heads() {
        let s = spec(PeStyle::Npe, 4, 64);
        assert_eq!(s.model_dim(), 256);
        assert!(check_heads(256, &s).is_ok());
        let bad = spec(PeStyle::Npe, 3, 64);
        assert!(matches!(
            check_heads(256, &bad),
            Err(LmecError::IndivisibleHeads { model_dim: 256, heads: 3 })
        ));
        let mut rng = Rng::new(1);
        let x = rng.normal_matrix(5, 256, 1.0);
        let proj = AttentionProjections::random(256, &mut rng);
        assert!(multi_head(&x, &x, &x, &bad, &proj).is_err());
    }

    #[test]
    fn head_permutation_is_undone_by_concatenation() {
        let (heads, d_k, n) = (3, 2, 5);
        let d = heads * d_k;
        let mut rng = Rng::new(2);
        let x = rng.normal_matrix(n, d, 1.0);
        let proj = AttentionProjections::random(d, &mut rng);
        let table = LearnablePositionTable::random(8, d, &mut rng);
        let s = spec(PeStyle::LmApe(table.clone()), heads, d_k);
        let base = multi_head(&x, &x, &x, &s, &proj).unwrap();

        let perm = [2usize, 0, 1];
        let col_perm: Vec<usize> = perm.iter().flat_map(|&h| h * d_k..(h + 1) * d_k).collect();
        let permute_cols = |m: &Matrix| m.transpose().select_rows(&col_perm).transpose();
        let permuted = AttentionProjections {
            w_q: permute_cols(&proj.w_q),
            b_q: permute_cols(&proj.b_q),
            w_k: permute_cols(&proj.w_k),
            b_k: permute_cols(&proj.b_k),
            w_v: permute_cols(&proj.w_v),
            b_v: permute_cols(&proj.b_v),
            w_o: proj.w_o.select_rows(&col_perm),
            b_o: proj.b_o.clone(),
        };
        let table_p = LearnablePositionTable::new(permute_cols(table.matrix())).unwrap();
        let s_p = spec(PeStyle::LmApe(table_p), heads, d_k);
        let out = multi_head(&x, &x, &x, &s_p, &permuted).unwrap();
        assert!(out.max_abs_diff(&base).unwrap() < 1e-14);
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let mut rng = Rng::new(3);
        let x = rng.normal_matrix(4, 8, 1.0);
        let mut proj = AttentionProjections::random(8, &mut rng);
        proj.w_o = Matrix::zeros(8, 8);
        let out = multi_head(&x, &x, &x, &spec(PeStyle::Npe, 2, 4), &proj).unwrap();
        assert_eq!(out, Matrix::zeros(4, 8));
    }

    #[test]
    fn heads_resolve_dynamic_order_consistently() {
        let mut rng = Rng::new(4);
        let x = rng.normal_matrix(9, 8, 1.0);
        let mut s = spec(PeStyle::MRpe { max_len: 16 }, 2, 4);
        s.order = OrderPolicy::Dynamic;
        let out = attention_heads(&x, &x, &x, &s).unwrap();
        assert_eq!(out.resolved_order, ProductOrder::Right);
        assert_eq!(out.values.shape(), (9, 8));
    }
}
