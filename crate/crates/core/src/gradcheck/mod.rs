//! Analytic backward passes and the central finite-difference oracle that
//! checks them.
//!
//! Backward passes exist for every forward operation with learnable
//! parameters: single-head linear attention (in both product orders,
//! implemented separately), the multi-head wrapper with its projections,
//! and the FFN and GLU layers.

mod attention;
mod feed_forward;
pub mod suite;

pub use attention::{backward_attention, backward_multi_head, AttentionGrads, MultiHeadGrads};
pub use feed_forward::{backward_ffn, backward_glu, FfnGrads, GluGrads};

use std::fmt;

use crate::error::{LmecError, Result};
use crate::numerics::Matrix;

pub const DEFAULT_EPS: f64 = 1e-5;
/// Coordinates whose ±`KINK_MARGIN·eps` perturbation changes the regime of
/// a non-smooth activation are left out of the comparison.
pub const KINK_MARGIN: f64 = 10.0;
pub const REL_TOLERANCE: f64 = 1e-6;
const REL_FLOOR: f64 = 1e-8;

/// Central differences `(f(x+εe) − f(x−εe)) / 2ε` for every coordinate.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Matrix) -> Result<f64>,
    x: &Matrix,
    eps: f64,
) -> Result<Matrix> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            out.push(central_difference(&mut f, x, i, j, eps)?);
        }
    }
    Matrix::new(x.rows(), x.cols(), out)
}

fn central_difference(
    f: &mut impl FnMut(&Matrix) -> Result<f64>,
    x: &Matrix,
    i: usize,
    j: usize,
    eps: f64,
) -> Result<f64> {
    let v = x.get(i, j);
    let plus = f(&x.with_entry(i, j, v + eps))?;
    let minus = f(&x.with_entry(i, j, v - eps))?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(LmecError::NonFinite { row: i, col: j });
    }
    Ok((plus - minus) / (2.0 * eps))
}

/// Finite differences that skip coordinates near a kink.
///
/// `regime` reports which side of its kink every non-smooth activation
/// input sits on. A coordinate is skipped, and `f` never evaluated for it,
/// when moving it by `±KINK_MARGIN·eps` changes that report. Skipped
/// entries are `NaN` in the returned gradient and `true` in the mask.
pub fn finite_diff_grad_excluding_kinks(
    mut f: impl FnMut(&Matrix) -> Result<f64>,
    mut regime: impl FnMut(&Matrix) -> Result<Vec<bool>>,
    x: &Matrix,
    eps: f64,
) -> Result<(Matrix, Vec<bool>)> {
    let mut out = Vec::with_capacity(x.len());
    let mut skipped = Vec::with_capacity(x.len());
    let reach = KINK_MARGIN * eps;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let v = x.get(i, j);
            let near_kink =
                regime(&x.with_entry(i, j, v + reach))? != regime(&x.with_entry(i, j, v - reach))?;
            skipped.push(near_kink);
            out.push(if near_kink {
                f64::NAN
            } else {
                central_difference(&mut f, x, i, j, eps)?
            });
        }
    }
    Ok((Matrix::from_parts(x.rows(), x.cols(), out), skipped))
}

/// Result of checking one gradient tensor against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub op_name: String,
    pub tensor_name: String,
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_coordinate: (usize, usize),
    /// Analytic and numeric values at the worst coordinate.
    pub worst_values: (f64, f64),
    /// `max |analytic − numeric|` over checked coordinates.
    pub max_abs_error: f64,
    pub eps_used: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradReport {
    pub const CSV_HEADER: &'static str = "op_name,tensor_name,max_rel_error,eps";

    pub fn passes(&self) -> bool {
        self.max_rel_error < REL_TOLERANCE && self.checked > 0
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:e},{:e}",
            self.op_name, self.tensor_name, self.max_rel_error, self.eps_used
        )
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<40} {:<8} rel={:.2e} at {:?} ({:.6e} vs {:.6e}; {} checked, {} skipped)",
            self.op_name,
            self.tensor_name,
            self.max_rel_error,
            self.worst_coordinate,
            self.worst_values.0,
            self.worst_values.1,
            self.checked,
            self.skipped
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares an analytic gradient against a numeric one, ignoring masked
/// coordinates.
pub fn compare(
    op_name: &str,
    tensor_name: &str,
    analytic: &Matrix,
    numeric: &Matrix,
    skipped: &[bool],
    eps: f64,
) -> Result<GradReport> {
    if analytic.shape() != numeric.shape() {
        return Err(LmecError::shape("gradcheck compare", analytic.shape(), numeric.shape()));
    }
    let mut worst = (0.0, (0, 0), (0.0, 0.0));
    let mut checked = 0;
    let mut max_abs = 0.0f64;
    for i in 0..analytic.rows() {
        for j in 0..analytic.cols() {
            if skipped.get(i * analytic.cols() + j).copied().unwrap_or(false) {
                continue;
            }
            checked += 1;
            let (a, n) = (analytic.get(i, j), numeric.get(i, j));
            let e = relative_error(a, n);
            max_abs = max_abs.max((a - n).abs());
            if e > worst.0 || e.is_nan() {
                worst = (e, (i, j), (a, n));
            }
        }
    }
    Ok(GradReport {
        op_name: op_name.to_string(),
        tensor_name: tensor_name.to_string(),
        max_rel_error: worst.0,
        worst_coordinate: worst.1,
        worst_values: worst.2,
        max_abs_error: max_abs,
        eps_used: eps,
        checked,
        skipped: skipped.iter().filter(|&&s| s).count(),
    })
}

/// `Σ upstream ⊙ output`, the scalar whose gradient the backward passes
/// compute when fed `upstream`.
pub(crate) fn weighted_sum(output: &Matrix, upstream: &Matrix) -> Result<f64> {
    if output.shape() != upstream.shape() {
        return Err(LmecError::shape("weighted_sum", output.shape(), upstream.shape()));
    }
    // Neumaier summation of exact two-product terms
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (a, b) in output.as_slice().iter().zip(upstream.as_slice()) {
        let p = a * b;
        let e = a.mul_add(*b, -p);
        for term in [p, e] {
            let t = sum + term;
            comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
            sum = t;
        }
    }
    Ok(sum + comp)
}
