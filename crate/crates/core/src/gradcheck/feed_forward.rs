use crate::blocks::{FfnParams, GluParams};
use crate::error::{LmecError, Result};
use crate::numerics::Matrix;

/// Input gradient plus parameter gradients laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnGrads {
    pub x: Matrix,
    pub params: FfnParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GluGrads {
    pub x: Matrix,
    pub params: GluParams,
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    x.matmul(w)?.broadcast_row_add(b)
}

fn bias_grad(g: &Matrix) -> Matrix {
    Matrix::row_vector(&g.col_sums())
}

fn check(op: &'static str, x: &Matrix, w_in: &Matrix, w_out: &Matrix, upstream: &Matrix) -> Result<()> {
    if x.cols() != w_in.rows() {
        return Err(LmecError::shape(op, x.shape(), w_in.shape()));
    }
    if upstream.shape() != (x.rows(), w_out.cols()) {
        return Err(LmecError::shape(op, (x.rows(), w_out.cols()), upstream.shape()));
    }
    Ok(())
}

pub fn backward_ffn(x: &Matrix, p: &FfnParams, upstream: &Matrix) -> Result<FfnGrads> {
    check("backward_ffn", x, &p.w1, &p.w2, upstream)?;
    let pre = affine(x, &p.w1, &p.b1)?;
    let hidden = pre.map(|v| p.activation.eval(v));
    let d_hidden = upstream.matmul_transpose_b(&p.w2)?;
    let d_pre = d_hidden.hadamard(&pre.map(|v| p.activation.derivative(v)))?;
    Ok(FfnGrads {
        x: d_pre.matmul_transpose_b(&p.w1)?,
        params: FfnParams {
            w1: x.matmul_transpose_a(&d_pre)?,
            b1: bias_grad(&d_pre),
            w2: hidden.matmul_transpose_a(upstream)?,
            b2: bias_grad(upstream),
            activation: p.activation,
        },
    })
}

pub fn backward_glu(x: &Matrix, p: &GluParams, upstream: &Matrix) -> Result<GluGrads> {
    check("backward_glu", x, &p.w1, &p.w3, upstream)?;
    let gate_pre = affine(x, &p.w1, &p.b1)?;
    let gate = gate_pre.map(|v| p.activation.eval(v));
    let linear = affine(x, &p.w2, &p.b2)?;
    let product = gate.hadamard(&linear)?;

    let d_product = upstream.matmul_transpose_b(&p.w3)?;
    let d_gate_pre = d_product
        .hadamard(&linear)?
        .hadamard(&gate_pre.map(|v| p.activation.derivative(v)))?;
    let d_linear = d_product.hadamard(&gate)?;
    Ok(GluGrads {
        x: d_gate_pre
            .matmul_transpose_b(&p.w1)?
            .add(&d_linear.matmul_transpose_b(&p.w2)?)?,
        params: GluParams {
            w1: x.matmul_transpose_a(&d_gate_pre)?,
            b1: bias_grad(&d_gate_pre),
            w2: x.matmul_transpose_a(&d_linear)?,
            b2: bias_grad(&d_linear),
            w3: product.matmul_transpose_a(upstream)?,
            b3: bias_grad(upstream),
            activation: p.activation,
        },
    })
}
