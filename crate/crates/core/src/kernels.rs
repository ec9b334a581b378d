//! Kernel feature maps and positional re-weighting.
//!
//! A kernel activation maps query and key rows into the non-negative
//! orthant so that `ψ(Q)ψ(K)ᵀ` can stand in for the softmax similarity.
//! The position embeddings here all act multiplicatively or additively on
//! that similarity in a way that keeps it factorizable, so the attention
//! engine can still regroup the product as `ψ(Q)(ψ(K)ᵀV)`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use crate::error::{LmecError, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    Sigmoid,
    TanhShift,
    EluPlusOne,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Relu,
        ActivationKind::Sigmoid,
        ActivationKind::TanhShift,
        ActivationKind::EluPlusOne,
    ];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::TanhShift => 0.5 * x.tanh() + 0.5,
            ActivationKind::EluPlusOne => {
                if x >= 0.0 {
                    x + 1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    /// Derivative; ReLU takes 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::TanhShift => {
                let t = x.tanh();
                0.5 * (1.0 - t * t)
            }
            ActivationKind::EluPlusOne => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
        }
    }

    /// Whether the map has a non-smooth point at 0.
    pub fn has_kink(self) -> bool {
        matches!(self, ActivationKind::Relu | ActivationKind::EluPlusOne)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::TanhShift => "tanh",
            ActivationKind::EluPlusOne => "elu",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = LmecError;

    fn from_str(s: &str) -> Result<Self> {
        ActivationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LmecError::Config(format!("unknown activation `{s}`")))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn apply_activation(kind: ActivationKind, x: &Matrix) -> Matrix {
    x.map(|v| kind.eval(v))
}

/// Learnable per-position phase table `R` (`max_len × width`), applied to
/// keys as `cos(R_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnablePositionTable {
    table: Matrix,
}

impl LearnablePositionTable {
    pub fn new(table: Matrix) -> Result<Self> {
        if !table.is_finite() {
            return Err(LmecError::Config("position table must be finite".into()));
        }
        Ok(Self { table })
    }

    /// Uniform on `[0, π/2]`, so initial weights lie in `[0, 1]`.
    pub fn random(max_len: usize, width: usize, rng: &mut Rng) -> Self {
        Self {
            table: rng.uniform_matrix(max_len, width, 0.0, FRAC_PI_2),
        }
    }

    /// One scalar per position, broadcast across `width` columns.
    pub fn from_position_scalars(values: &[f64], width: usize) -> Result<Self> {
        Self::new(Matrix::from_fn(values.len(), width, |j, _| values[j]))
    }

    pub fn max_len(&self) -> usize {
        self.table.rows()
    }

    pub fn width(&self) -> usize {
        self.table.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.table
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.table
    }

    /// Columns `start..end`, used to hand each head its own slice.
    pub fn column_slice(&self, start: usize, end: usize) -> Self {
        Self {
            table: self.table.column_block(start, end),
        }
    }
}

/// How position information enters the kernel similarity.
#[derive(Clone, Debug, PartialEq)]
pub enum PeStyle {
    /// Bare `ψ(Q)ψ(K)ᵀ`.
    Npe,
    /// cosFormer re-weighting `cos(π(i−j)/2M)`, split into cos and sin terms.
    MRpe { max_len: usize },
    /// Key-side `cos(πj/2M)` extended to a vector by `w_ext` (`1 × d_k`).
    MApe { w_ext: Matrix, max_len: usize },
    /// Key-side `cos(R_j)` with a learnable table.
    LmApe(LearnablePositionTable),
    /// Additive bias `cos(π(i−j)/2M)` on the kernel similarity.
    ARpe { max_len: usize },
}

impl PeStyle {
    pub fn name(&self) -> &'static str {
        match self {
            PeStyle::Npe => "npe",
            PeStyle::MRpe { .. } => "mrpe",
            PeStyle::MApe { .. } => "mape",
            PeStyle::LmApe(_) => "lmape",
            PeStyle::ARpe { .. } => "arpe",
        }
    }

    /// Longest sequence the style accepts; `None` when unbounded.
    pub fn max_len(&self) -> Option<usize> {
        match self {
            PeStyle::Npe => None,
            PeStyle::MRpe { max_len } | PeStyle::ARpe { max_len } => Some(*max_len),
            PeStyle::MApe { max_len, .. } => Some(*max_len),
            PeStyle::LmApe(t) => Some(t.max_len()),
        }
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        match self.max_len() {
            Some(max_len) if n > max_len => Err(LmecError::SequenceTooLong { n, max_len }),
            _ => Ok(()),
        }
    }

    /// The style restricted to columns `start..end` of any per-column
    /// parameters (the LM-APE table, the M-APE extension row).
    pub fn column_slice(&self, start: usize, end: usize) -> PeStyle {
        match self {
            PeStyle::MApe { w_ext, max_len } => PeStyle::MApe {
                w_ext: w_ext.column_block(start, end),
                max_len: *max_len,
            },
            PeStyle::LmApe(t) => PeStyle::LmApe(t.column_slice(start, end)),
            other => other.clone(),
        }
    }

    /// The learnable tensor the style carries, if any.
    pub fn params(&self) -> Option<&Matrix> {
        match self {
            PeStyle::MApe { w_ext, .. } => Some(w_ext),
            PeStyle::LmApe(t) => Some(t.matrix()),
            _ => None,
        }
    }

    pub(crate) fn params_mut(&mut self) -> Option<&mut Matrix> {
        match self {
            PeStyle::MApe { w_ext, .. } => Some(w_ext),
            PeStyle::LmApe(t) => Some(t.matrix_mut()),
            _ => None,
        }
    }

    /// Column width of the per-column parameters, if any.
    pub fn param_width(&self) -> Option<usize> {
        match self {
            PeStyle::MApe { w_ext, .. } => Some(w_ext.cols()),
            PeStyle::LmApe(t) => Some(t.width()),
            _ => None,
        }
    }
}

/// Which of the five position-embedding families a [`PeStyle`] belongs to,
/// without its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PeKind {
    Npe,
    MRpe,
    MApe,
    LmApe,
    ARpe,
}

impl PeKind {
    pub const ALL: [PeKind; 5] = [
        PeKind::Npe,
        PeKind::MRpe,
        PeKind::MApe,
        PeKind::LmApe,
        PeKind::ARpe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PeKind::Npe => "npe",
            PeKind::MRpe => "mrpe",
            PeKind::MApe => "mape",
            PeKind::LmApe => "lmape",
            PeKind::ARpe => "arpe",
        }
    }

    /// Instantiates the style. `width` is the column count of per-column
    /// parameters (`d_k` for one head, `heads · d_k` for a multi-head
    /// layer). M-APE's extension row is drawn from `[0.5, 1.5]` to keep the
    /// weights non-negative.
    pub fn instantiate(self, max_len: usize, width: usize, rng: &mut Rng) -> PeStyle {
        match self {
            PeKind::Npe => PeStyle::Npe,
            PeKind::MRpe => PeStyle::MRpe { max_len },
            PeKind::MApe => PeStyle::MApe {
                w_ext: rng.uniform_matrix(1, width, 0.5, 1.5),
                max_len,
            },
            PeKind::LmApe => PeStyle::LmApe(LearnablePositionTable::random(max_len, width, rng)),
            PeKind::ARpe => PeStyle::ARpe { max_len },
        }
    }
}

impl fmt::Display for PeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PeKind {
    type Err = LmecError;

    fn from_str(s: &str) -> Result<Self> {
        PeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LmecError::Config(format!("unknown position embedding `{s}`")))
    }
}

impl From<&PeStyle> for PeKind {
    fn from(pe: &PeStyle) -> Self {
        match pe {
            PeStyle::Npe => PeKind::Npe,
            PeStyle::MRpe { .. } => PeKind::MRpe,
            PeStyle::MApe { .. } => PeKind::MApe,
            PeStyle::LmApe(_) => PeKind::LmApe,
            PeStyle::ARpe { .. } => PeKind::ARpe,
        }
    }
}

/// Phase angle `π·i/(2M)` of position `i`.
pub fn position_phase(i: usize, max_len: usize) -> f64 {
    FRAC_PI_2 * i as f64 / max_len as f64
}

fn check_positions(n: usize, max_len: usize) -> Result<()> {
    if n > max_len {
        return Err(LmecError::SequenceTooLong { n, max_len });
    }
    Ok(())
}

/// `cos(πi/2M)` and `sin(πi/2M)` for positions `0..n`.
pub fn cosformer_phase_vectors(max_len: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    check_positions(n, max_len)?;
    Ok((0..n)
        .map(|i| {
            let p = position_phase(i, max_len);
            (p.cos(), p.sin())
        })
        .unzip())
}

/// Row `j` is `cos(πj/2M) · w_ext`.
pub fn m_ape_weights(max_len: usize, n: usize, w_ext: &Matrix) -> Result<Matrix> {
    check_positions(n, max_len)?;
    if w_ext.rows() != 1 {
        return Err(LmecError::shape("m_ape_weights", (1, w_ext.cols()), w_ext.shape()));
    }
    Ok(Matrix::from_fn(n, w_ext.cols(), |j, c| {
        position_phase(j, max_len).cos() * w_ext.get(0, c)
    }))
}

/// Row `j` is `cos(R_j)`.
pub fn lm_ape_weights(table: &LearnablePositionTable, n: usize) -> Result<Matrix> {
    check_positions(n, table.max_len())?;
    Ok(table.matrix().top_rows(n).map(f64::cos))
}

/// The additive bias `B[i][j] = cos(π(i−j)/2M)` in factored form,
/// `B = cos_q cos_kᵀ + sin_q sin_kᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ARpeBias {
    pub cos_q: Vec<f64>,
    pub cos_k: Vec<f64>,
    pub sin_q: Vec<f64>,
    pub sin_k: Vec<f64>,
}

impl ARpeBias {
    /// Materializes the `n × n` bias.
    pub fn dense(&self) -> Matrix {
        let n = self.cos_q.len();
        Matrix::from_fn(n, n, |i, j| {
            self.cos_q[i] * self.cos_k[j] + self.sin_q[i] * self.sin_k[j]
        })
    }
}

pub fn a_rpe_bias_terms(max_len: usize, n: usize) -> Result<ARpeBias> {
    let (cos, sin) = cosformer_phase_vectors(max_len, n)?;
    Ok(ARpeBias {
        cos_q: cos.clone(),
        cos_k: cos,
        sin_q: sin.clone(),
        sin_k: sin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use crate::numerics::Rng;
    use std::f64::consts::PI;

    #[test]
    fn activation_fixed_points() {
        use ActivationKind::*;
        assert_eq!(EluPlusOne.eval(0.0), 1.0);
        assert_eq!(Relu.eval(-3.0), 0.0);
        assert_eq!(Relu.eval(2.0), 2.0);
        assert_eq!(Sigmoid.eval(0.0), 0.5);
        assert_eq!(TanhShift.eval(0.0), 0.5);
        assert_abs_diff_eq!(EluPlusOne.eval(-1.0), (-1f64).exp(), epsilon = 1e-15);
        assert!(TanhShift.eval(50.0) <= 1.0);
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        let h = 1e-6;
        for kind in ActivationKind::ALL {
            for &x in &[-2.3, -0.4, 0.7, 1.9] {
                let fd = (kind.eval(x + h) - kind.eval(x - h)) / (2.0 * h);
                assert_abs_diff_eq!(kind.derivative(x), fd, epsilon = 1e-8);
            }
        }
        assert_eq!(ActivationKind::Relu.derivative(0.0), 0.0);
    }

    #[test]
    fn names_round_trip() {
        for k in ActivationKind::ALL {
            assert_eq!(k.name().parse::<ActivationKind>().unwrap(), k);
        }
        for k in PeKind::ALL {
            assert_eq!(k.name().parse::<PeKind>().unwrap(), k);
        }
        assert!("softmax".parse::<ActivationKind>().is_err());
    }

    #[test]
    fn phase_endpoints() {
        let (c, s) = cosformer_phase_vectors(8, 8).unwrap();
        assert_eq!(c[0], 1.0);
        assert_eq!(s[0], 0.0);
        assert_abs_diff_eq!(position_phase(8, 8).cos(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(position_phase(8, 8).sin(), 1.0, epsilon = 1e-15);
        for (a, b) in c.iter().zip(&s) {
            assert_abs_diff_eq!(a * a + b * b, 1.0, epsilon = 1e-15);
        }
        assert!(matches!(
            cosformer_phase_vectors(4, 5),
            Err(LmecError::SequenceTooLong { n: 5, max_len: 4 })
        ));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn m_ape_examples() {
        let w = Matrix::row_vector(&[1.0, 1.0, 1.0]);
        let m = m_ape_weights(4, 3, &w).unwrap();
        assert_eq!(m.row(0), &[1.0, 1.0, 1.0]);

        let w = Matrix::row_vector(&[2.0, -1.0]);
        let m = m_ape_weights(4, 3, &w).unwrap();
        assert_abs_diff_eq!(m.get(2, 0), 1.41421356, epsilon = 1e-8);
        assert_abs_diff_eq!(m.get(2, 1), -0.70710678, epsilon = 1e-8);

        // j = M lies outside 0..N for any admissible N; evaluate the row rule directly.
        let w = Matrix::row_vector(&[3.0, -7.0]);
        for c in 0..2 {
            assert_abs_diff_eq!(position_phase(4, 4).cos() * w.get(0, c), 0.0, epsilon = 1e-15);
        }
        assert!(m_ape_weights(4, 5, &w).is_err());
    }

    #[test]
    fn lm_ape_examples() {
        let table = LearnablePositionTable::new(Matrix::from_fn(4, 3, |j, _| {
            if j % 2 == 0 {
                0.0
            } else {
                PI
            }
        }))
        .unwrap();
        let w = lm_ape_weights(&table, 4).unwrap();
        assert_eq!(w.row(0), &[1.0, 1.0, 1.0]);
        assert_eq!(w.row(1), &[-1.0, -1.0, -1.0]);
        assert!(lm_ape_weights(&table, 5).is_err());

        // a scalar per position is broadcast across every column
        let scalars = LearnablePositionTable::from_position_scalars(&[0.3, 1.1], 4).unwrap();
        let w = lm_ape_weights(&scalars, 2).unwrap();
        assert_eq!(w.shape(), (2, 4));
        assert!(w.row(1).iter().all(|&v| v == 1.1f64.cos()));
    }

    #[test]
    fn random_table_lies_in_first_quadrant() {
        let t = LearnablePositionTable::random(16, 8, &mut Rng::new(5));
        assert_eq!((t.max_len(), t.width()), (16, 8));
        let w = lm_ape_weights(&t, 16).unwrap();
        assert!(w.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn a_rpe_bias_reconstructs_direct_cosine() {
        let (m, n) = (20, 16);
        let bias = a_rpe_bias_terms(m, n).unwrap().dense();
        for i in 0..n {
            assert_abs_diff_eq!(bias.get(i, i), 1.0, epsilon = 1e-15);
            for j in 0..n {
                let direct = (PI / 2.0 * (i as f64 - j as f64) / m as f64).cos();
                assert_abs_diff_eq!(bias.get(i, j), direct, epsilon = 1e-14);
                assert_abs_diff_eq!(bias.get(i, j), bias.get(j, i), epsilon = 1e-15);
            }
        }
        assert!(a_rpe_bias_terms(4, 5).is_err());
    }

    #[test]
    fn per_head_slicing() {
        let pe = PeKind::LmApe.instantiate(10, 6, &mut Rng::new(1));
        let s = pe.column_slice(3, 6);
        assert_eq!(s.param_width(), Some(3));
        assert_eq!(s.max_len(), Some(10));
        assert_eq!(PeStyle::Npe.column_slice(0, 2), PeStyle::Npe);
    }

    proptest! {
        #[test]
        fn activations_are_non_negative(seed in any::<u64>()) {
            let x = Rng::new(seed).normal_matrix(5, 7, 10.0);
            for kind in ActivationKind::ALL {
                prop_assert!(apply_activation(kind, &x).as_slice().iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn lm_ape_identity_and_sign_flip(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let k = rng.normal_matrix(6, 4, 1.0);
            let mask: Vec<bool> = (0..24).map(|_| rng.below(2) == 1).collect();
            let table = LearnablePositionTable::new(Matrix::from_fn(6, 4, |i, j| {
                if mask[i * 4 + j] { PI } else { 0.0 }
            })).unwrap();
            let weighted = k.hadamard(&lm_ape_weights(&table, 6).unwrap()).unwrap();
            for i in 0..6 {
                for j in 0..4 {
                    let expect = if mask[i * 4 + j] { -k.get(i, j) } else { k.get(i, j) };
                    prop_assert_eq!(weighted.get(i, j), expect);
                }
            }
        }

        #[test]
        fn cosformer_decomposition_reconstructs_relative_weighting(seed in any::<u64>(), n in 1usize..=32, extra in 0usize..8) {
            let m = n + extra;
            let mut rng = Rng::new(seed);
            let q = apply_activation(ActivationKind::EluPlusOne, &rng.normal_matrix(n, 3, 1.0));
            let k = apply_activation(ActivationKind::EluPlusOne, &rng.normal_matrix(n, 3, 1.0));
            let (c, s) = cosformer_phase_vectors(m, n).unwrap();
            let decomposed = q.scale_rows(&c).unwrap().matmul_transpose_b(&k.scale_rows(&c).unwrap()).unwrap()
                .add(&q.scale_rows(&s).unwrap().matmul_transpose_b(&k.scale_rows(&s).unwrap()).unwrap()).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
                    let direct = dot * (PI / 2.0 * (i as f64 - j as f64) / m as f64).cos();
                    prop_assert!((decomposed.get(i, j) - direct).abs() / direct.abs() < 1e-12);
                }
            }
        }
    }
}
