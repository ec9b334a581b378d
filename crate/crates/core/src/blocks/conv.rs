use crate::error::{LmecError, Result};
use crate::kernels::sigmoid;
use crate::numerics::{Matrix, Rng};

/// Pointwise expansion with a sigmoid gate, depthwise convolution over time,
/// pointwise projection. No batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvModule {
    /// `d × 2d`; the first half of the output is the value, the second the gate.
    pub pw_in: Matrix,
    pub b_in: Matrix,
    /// `width × d`, tap `o` multiplies the input at time offset `o − width/2`.
    pub depthwise: Matrix,
    pub b_dw: Matrix,
    pub pw_out: Matrix,
    pub b_out: Matrix,
}

impl ConvModule {
    pub fn new(
        pw_in: Matrix,
        b_in: Matrix,
        depthwise: Matrix,
        b_dw: Matrix,
        pw_out: Matrix,
        b_out: Matrix,
    ) -> Result<Self> {
        let d = pw_in.rows();
        let expect = [
            ("pw_in", pw_in.shape(), (d, 2 * d)),
            ("b_in", b_in.shape(), (1, 2 * d)),
            ("depthwise", (1, depthwise.cols()), (1, d)),
            ("b_dw", b_dw.shape(), (1, d)),
            ("pw_out", pw_out.shape(), (d, d)),
            ("b_out", b_out.shape(), (1, d)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(LmecError::Config(format!(
                    "conv module {name} has shape {got:?}, expected {want:?}"
                )));
            }
        }
        if depthwise.rows().is_multiple_of(2) {
            return Err(LmecError::Config(format!(
                "depthwise kernel width {} must be odd",
                depthwise.rows()
            )));
        }
        Ok(Self {
            pw_in,
            b_in,
            depthwise,
            b_dw,
            pw_out,
            b_out,
        })
    }

    pub fn random(d: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        let s = 1.0 / (d as f64).sqrt();
        Self::new(
            rng.normal_matrix(d, 2 * d, s),
            Matrix::zeros(1, 2 * d),
            rng.normal_matrix(width, d, 1.0 / (width as f64).sqrt()),
            Matrix::zeros(1, d),
            rng.normal_matrix(d, d, s),
            Matrix::zeros(1, d),
        )
    }

    pub fn zeros(d: usize, width: usize) -> Result<Self> {
        Self::new(
            Matrix::zeros(d, 2 * d),
            Matrix::zeros(1, 2 * d),
            Matrix::zeros(width, d),
            Matrix::zeros(1, d),
            Matrix::zeros(d, d),
            Matrix::zeros(1, d),
        )
    }

    pub fn model_dim(&self) -> usize {
        self.pw_in.rows()
    }

    pub fn kernel_width(&self) -> usize {
        self.depthwise.rows()
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("pw_in", &self.pw_in),
            ("b_in", &self.b_in),
            ("depthwise", &self.depthwise),
            ("b_dw", &self.b_dw),
            ("pw_out", &self.pw_out),
            ("b_out", &self.b_out),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.pw_in,
            &mut self.b_in,
            &mut self.depthwise,
            &mut self.b_dw,
            &mut self.pw_out,
            &mut self.b_out,
        ]
    }
}

/// Same-padded depthwise convolution; out-of-range time steps repeat the
/// nearest edge row.
fn depthwise_conv(u: &Matrix, kernel: &Matrix, bias: &Matrix) -> Matrix {
    let (n, d) = u.shape();
    let half = kernel.rows() / 2;
    let mut out = Matrix::zeros(n, d);
    for t in 0..n {
        let row = out.row_mut(t);
        row.copy_from_slice(bias.row(0));
        for o in 0..kernel.rows() {
            let src = (t + o).saturating_sub(half).min(n - 1);
            for ((acc, &w), &x) in row.iter_mut().zip(kernel.row(o)).zip(u.row(src)) {
                *acc += w * x;
            }
        }
    }
    out
}

pub fn conv_module_forward(x: &Matrix, p: &ConvModule) -> Result<Matrix> {
    let d = p.model_dim();
    if x.cols() != d {
        return Err(LmecError::shape("conv_module_forward", x.shape(), p.pw_in.shape()));
    }
    let h = x.matmul(&p.pw_in)?.broadcast_row_add(&p.b_in)?;
    let gated = Matrix::from_fn(x.rows(), d, |i, c| h.get(i, c) * sigmoid(h.get(i, c + d)));
    let conv = depthwise_conv(&gated, &p.depthwise, &p.b_dw);
    conv.matmul(&p.pw_out)?.broadcast_row_add(&p.b_out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Value half is the identity, gate bias saturates σ to exactly 1.0.
    fn identity_module(d: usize, width: usize) -> ConvModule {
        let pw_in = Matrix::from_fn(d, 2 * d, |i, j| if i == j { 1.0 } else { 0.0 });
        let b_in = Matrix::from_fn(1, 2 * d, |_, j| if j < d { 0.0 } else { 50.0 });
        let depthwise = Matrix::from_fn(width, d, |o, _| if o == width / 2 { 1.0 } else { 0.0 });
        ConvModule::new(
            pw_in,
            b_in,
            depthwise,
            Matrix::zeros(1, d),
            Matrix::identity(d),
            Matrix::zeros(1, d),
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        assert_eq!(sigmoid(50.0), 1.0);
        let x = Rng::new(0).normal_matrix(20, 6, 1.0);
        let out = conv_module_forward(&x, &identity_module(6, 15)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn constant_rows_stay_constant_under_unit_sum_kernel() {
        let mut p = identity_module(4, 15);
        let mut rng = Rng::new(1);
        let raw = rng.uniform_matrix(15, 4, 0.0, 1.0);
        let sums = raw.col_sums();
        p.depthwise = Matrix::from_fn(15, 4, |o, c| raw.get(o, c) / sums[c]);
        let row = rng.normal_matrix(1, 4, 1.0);
        let x = Matrix::from_fn(9, 4, |_, c| row.get(0, c));
        let out = conv_module_forward(&x, &p).unwrap();
        for i in 0..9 {
            for c in 0..4 {
                assert!((out.get(i, c) - x.get(i, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = Rng::new(2);
        let p = ConvModule::random(8, 15, &mut rng).unwrap();
        for n in [1, 15, 100] {
            let x = rng.normal_matrix(n, 8, 1.0);
            let out = conv_module_forward(&x, &p).unwrap();
            assert_eq!(out.shape(), (n, 8));
            assert!(out.is_finite());
        }
        assert!(conv_module_forward(&rng.normal_matrix(3, 7, 1.0), &p).is_err());
    }

    #[test]
    fn even_width_is_rejected() {
        assert!(ConvModule::zeros(4, 14).is_err());
        assert!(ConvModule::zeros(4, 15).is_ok());
    }

    #[test]
    fn edge_replication_at_boundaries() {
        // width 3, kernel picks the previous time step only
        let mut p = identity_module(1, 3);
        p.depthwise = Matrix::column_vector(&[1.0, 0.0, 0.0]);
        let x = Matrix::column_vector(&[1.0, 2.0, 3.0]);
        let out = conv_module_forward(&x, &p).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 1.0, 2.0]);
    }
}
