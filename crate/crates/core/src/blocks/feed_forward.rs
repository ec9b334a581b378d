use crate::error::{LmecError, Result};
use crate::numerics::{Matrix, Rng};

use super::GluActivation;

/// Two-layer feed-forward `σ(xW₁ + b₁)W₂ + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub activation: GluActivation,
}

/// Gated unit `(σ(xW₁ + b₁) ⊗ (xW₂ + b₂))W₃ + b₃`.
#[derive(Clone, Debug, PartialEq)]
pub struct GluParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
    pub activation: GluActivation,
}

/// Hidden width that keeps a GLU at or just under the weight count of an
/// FFN with hidden width `h_ffn`.
pub fn glu_hidden_dim(h_ffn: usize) -> usize {
    2 * h_ffn / 3
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    x.matmul(w)?.broadcast_row_add(b)
}

fn check_input(op: &'static str, x: &Matrix, w: &Matrix) -> Result<()> {
    if x.cols() != w.rows() {
        return Err(LmecError::shape(op, x.shape(), w.shape()));
    }
    Ok(())
}

impl FfnParams {
    pub fn random(h_o: usize, h_ffn: usize, activation: GluActivation, rng: &mut Rng) -> Self {
        Self {
            w1: rng.normal_matrix(h_o, h_ffn, 1.0 / (h_o as f64).sqrt()),
            b1: Matrix::zeros(1, h_ffn),
            w2: rng.normal_matrix(h_ffn, h_o, 1.0 / (h_ffn as f64).sqrt()),
            b2: Matrix::zeros(1, h_o),
            activation,
        }
    }

    pub fn zeros(h_o: usize, h_ffn: usize, activation: GluActivation) -> Self {
        Self {
            w1: Matrix::zeros(h_o, h_ffn),
            b1: Matrix::zeros(1, h_ffn),
            w2: Matrix::zeros(h_ffn, h_o),
            b2: Matrix::zeros(1, h_o),
            activation,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    /// Weight entries only, biases excluded.
    pub fn weight_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.b1.len() + self.b2.len()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

impl GluParams {
    pub fn random(h_o: usize, h_glu: usize, activation: GluActivation, rng: &mut Rng) -> Self {
        let s_in = 1.0 / (h_o as f64).sqrt();
        Self {
            w1: rng.normal_matrix(h_o, h_glu, s_in),
            b1: Matrix::zeros(1, h_glu),
            w2: rng.normal_matrix(h_o, h_glu, s_in),
            b2: Matrix::zeros(1, h_glu),
            w3: rng.normal_matrix(h_glu, h_o, 1.0 / (h_glu as f64).sqrt()),
            b3: Matrix::zeros(1, h_o),
            activation,
        }
    }

    pub fn zeros(h_o: usize, h_glu: usize, activation: GluActivation) -> Self {
        Self {
            w1: Matrix::zeros(h_o, h_glu),
            b1: Matrix::zeros(1, h_glu),
            w2: Matrix::zeros(h_o, h_glu),
            b2: Matrix::zeros(1, h_glu),
            w3: Matrix::zeros(h_glu, h_o),
            b3: Matrix::zeros(1, h_o),
            activation,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn weight_count(&self) -> usize {
        self.w1.len() + self.w2.len() + self.w3.len()
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.b1.len() + self.b2.len() + self.b3.len()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }
}

pub fn ffn_forward(x: &Matrix, p: &FfnParams) -> Result<Matrix> {
    check_input("ffn_forward", x, &p.w1)?;
    let hidden = affine(x, &p.w1, &p.b1)?.map(|v| p.activation.eval(v));
    affine(&hidden, &p.w2, &p.b2)
}

pub fn glu_forward(x: &Matrix, p: &GluParams) -> Result<Matrix> {
    check_input("glu_forward", x, &p.w1)?;
    let gate = affine(x, &p.w1, &p.b1)?.map(|v| p.activation.eval(v));
    let linear = affine(x, &p.w2, &p.b2)?;
    affine(&gate.hadamard(&linear)?, &p.w3, &p.b3)
}

/// Either feed-forward form; a block holds two of these.
#[derive(Clone, Debug, PartialEq)]
pub enum FeedForward {
    Ffn(FfnParams),
    Glu(GluParams),
}

impl FeedForward {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            FeedForward::Ffn(p) => ffn_forward(x, p),
            FeedForward::Glu(p) => glu_forward(x, p),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        match self {
            FeedForward::Ffn(p) => p.tensors().to_vec(),
            FeedForward::Glu(p) => p.tensors().to_vec(),
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            FeedForward::Ffn(p) => p.tensors_mut().into_iter().collect(),
            FeedForward::Glu(p) => p.tensors_mut().into_iter().collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            FeedForward::Ffn(p) => p.param_count(),
            FeedForward::Glu(p) => p.param_count(),
        }
    }
}
