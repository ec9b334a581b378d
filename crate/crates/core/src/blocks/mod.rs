//! Feed-forward, gated-linear-unit and convolution modules, and the
//! Macaron-style block that stacks them around linear attention.

mod conv;
mod feed_forward;

use std::fmt;
use std::str::FromStr;

pub use conv::{conv_module_forward, ConvModule};
pub use feed_forward::{ffn_forward, glu_forward, glu_hidden_dim, FeedForward, FfnParams, GluParams};

use crate::attention::{multi_head, AttentionProjections, LinearAttentionSpec, OrderPolicy};
use crate::error::{LmecError, Result};
use crate::kernels::{sigmoid, ActivationKind, PeKind};
use crate::numerics::{Matrix, Rng};

const GELU_C: f64 = 0.7978845608;
const GELU_A: f64 = 0.044715;

/// Pointwise activation for the feed-forward and GLU layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GluActivation {
    Swish,
    Elu,
    Relu,
    /// tanh approximation
    Gelu,
}

impl GluActivation {
    pub const ALL: [GluActivation; 4] = [
        GluActivation::Swish,
        GluActivation::Elu,
        GluActivation::Relu,
        GluActivation::Gelu,
    ];

    pub fn eval(self, x: f64) -> f64 {
        match self {
            GluActivation::Swish => x * sigmoid(x),
            GluActivation::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            GluActivation::Relu => x.max(0.0),
            GluActivation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    /// Derivative; ReLU takes 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            GluActivation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            GluActivation::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            GluActivation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            GluActivation::Gelu => {
                let inner = GELU_C * (x + GELU_A * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }

    pub fn has_kink(self) -> bool {
        matches!(self, GluActivation::Relu | GluActivation::Elu)
    }

    pub fn name(self) -> &'static str {
        match self {
            GluActivation::Swish => "swish",
            GluActivation::Elu => "elu",
            GluActivation::Relu => "relu",
            GluActivation::Gelu => "gelu",
        }
    }
}

impl fmt::Display for GluActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GluActivation {
    type Err = LmecError;

    fn from_str(s: &str) -> Result<Self> {
        GluActivation::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LmecError::Config(format!("unknown feed-forward activation `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(d: usize) -> Self {
        Self {
            gamma: Matrix::ones(1, d),
            beta: Matrix::zeros(1, d),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.gamma.cols() {
            return Err(LmecError::shape("layer_norm", x.shape(), self.gamma.shape()));
        }
        let d = x.cols() as f64;
        let mut rows = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            let r = x.row(i);
            let mean = r.iter().sum::<f64>() / d;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + Self::EPS).sqrt();
            rows.extend(
                r.iter()
                    .zip(self.gamma.row(0).iter().zip(self.beta.row(0)))
                    .map(|(v, (g, b))| (v - mean) * inv * g + b),
            );
        }
        Matrix::new(x.rows(), x.cols(), rows)
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Matrix; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedForwardKind {
    Ffn,
    Glu,
}

/// Shape and variant choices for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub h_ffn: usize,
    pub feed_forward: FeedForwardKind,
    pub ff_activation: GluActivation,
    pub kernel: ActivationKind,
    pub pe: PeKind,
    pub order: OrderPolicy,
    pub normalize: bool,
    pub conv_width: usize,
    pub max_len: usize,
}

impl Default for BlockConfig {
    /// The 256-wide, 4-head, width-15 encoder block with ELU kernels,
    /// LM-APE and GeLU-gated feed-forward layers.
    fn default() -> Self {
        Self {
            d_model: 256,
            heads: 4,
            h_ffn: 2048,
            feed_forward: FeedForwardKind::Glu,
            ff_activation: GluActivation::Gelu,
            kernel: ActivationKind::EluPlusOne,
            pe: PeKind::LmApe,
            order: OrderPolicy::Dynamic,
            normalize: true,
            conv_width: 15,
            max_len: 2000,
        }
    }
}

impl BlockConfig {
    fn feed_forward(&self, rng: Option<&mut Rng>) -> FeedForward {
        let (d, act) = (self.d_model, self.ff_activation);
        match (self.feed_forward, rng) {
            (FeedForwardKind::Ffn, Some(rng)) => FeedForward::Ffn(FfnParams::random(d, self.h_ffn, act, rng)),
            (FeedForwardKind::Ffn, None) => FeedForward::Ffn(FfnParams::zeros(d, self.h_ffn, act)),
            (FeedForwardKind::Glu, Some(rng)) => {
                FeedForward::Glu(GluParams::random(d, glu_hidden_dim(self.h_ffn), act, rng))
            }
            (FeedForwardKind::Glu, None) => {
                FeedForward::Glu(GluParams::zeros(d, glu_hidden_dim(self.h_ffn), act))
            }
        }
    }

    fn attention_spec(&self, rng: &mut Rng) -> Result<LinearAttentionSpec> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(LmecError::IndivisibleHeads {
                model_dim: self.d_model,
                heads: self.heads,
            });
        }
        Ok(LinearAttentionSpec {
            activation: self.kernel,
            pe: self.pe.instantiate(self.max_len, self.d_model, rng),
            order: self.order,
            normalize: self.normalize,
            d_k: self.d_model / self.heads,
            heads: self.heads,
        })
    }
}

/// Every learnable tensor of one block, plus the attention variant.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ff1: FeedForward,
    pub ln_ff1: LayerNorm,
    pub attn: AttentionProjections,
    pub attn_spec: LinearAttentionSpec,
    pub ln_attn: LayerNorm,
    pub conv: ConvModule,
    pub ln_conv: LayerNorm,
    pub ff2: FeedForward,
    pub ln_ff2: LayerNorm,
    pub ln_final: LayerNorm,
}

impl BlockParams {
    pub fn random(cfg: &BlockConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ff1: cfg.feed_forward(Some(rng)),
            ln_ff1: LayerNorm::new(d),
            attn: AttentionProjections::random(d, rng),
            attn_spec: cfg.attention_spec(rng)?,
            ln_attn: LayerNorm::new(d),
            conv: ConvModule::random(d, cfg.conv_width, rng)?,
            ln_conv: LayerNorm::new(d),
            ff2: cfg.feed_forward(Some(rng)),
            ln_ff2: LayerNorm::new(d),
            ln_final: LayerNorm::new(d),
        })
    }

    /// All weights and biases zero, layer norms at identity scale. Position
    /// parameters take their neutral value instead: a zero LM-APE table and
    /// a ones M-APE extension row both leave `ψ(K)` unweighted.
    pub fn zeros(cfg: &BlockConfig) -> Result<Self> {
        let d = cfg.d_model;
        let mut rng = Rng::new(0);
        let mut attn_spec = cfg.attention_spec(&mut rng)?;
        let neutral = if cfg.pe == PeKind::MApe { 1.0 } else { 0.0 };
        if let Some(m) = attn_spec.pe.params_mut() {
            *m = Matrix::filled(m.rows(), m.cols(), neutral);
        }
        Ok(Self {
            ff1: cfg.feed_forward(None),
            ln_ff1: LayerNorm::new(d),
            attn: AttentionProjections::zeros(d),
            attn_spec,
            ln_attn: LayerNorm::new(d),
            conv: ConvModule::zeros(d, cfg.conv_width)?,
            ln_conv: LayerNorm::new(d),
            ff2: cfg.feed_forward(None),
            ln_ff2: LayerNorm::new(d),
            ln_final: LayerNorm::new(d),
        })
    }

    pub fn model_dim(&self) -> usize {
        self.attn.model_dim()
    }

    /// Learnable tensors in declaration order; this is the order the
    /// parameter file uses.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.ff1.tensors().into_iter().map(|(_, m)| m).collect();
        out.extend([&self.ln_ff1.gamma, &self.ln_ff1.beta]);
        out.extend(self.attn.tensors().into_iter().map(|(_, m)| m));
        out.extend(self.attn_spec.pe.params());
        out.extend([&self.ln_attn.gamma, &self.ln_attn.beta]);
        out.extend(self.conv.tensors().into_iter().map(|(_, m)| m));
        out.extend([&self.ln_conv.gamma, &self.ln_conv.beta]);
        out.extend(self.ff2.tensors().into_iter().map(|(_, m)| m));
        out.extend([&self.ln_ff2.gamma, &self.ln_ff2.beta]);
        out.extend([&self.ln_final.gamma, &self.ln_final.beta]);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.ff1.tensors_mut();
        out.extend(self.ln_ff1.tensors_mut());
        out.extend(self.attn.tensors_mut());
        out.extend(self.attn_spec.pe.params_mut());
        out.extend(self.ln_attn.tensors_mut());
        out.extend(self.conv.tensors_mut());
        out.extend(self.ln_conv.tensors_mut());
        out.extend(self.ff2.tensors_mut());
        out.extend(self.ln_ff2.tensors_mut());
        out.extend(self.ln_final.tensors_mut());
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.model_dim() {
            return Err(LmecError::shape(
                "lmec_block_forward",
                x.shape(),
                (x.rows(), self.model_dim()),
            ));
        }
        Ok(())
    }
}

/// `x + scale · f(x)`.
pub fn residual(x: &Matrix, scale: f64, f: impl FnOnce(&Matrix) -> Result<Matrix>) -> Result<Matrix> {
    let fx = f(x)?;
    if scale == 1.0 {
        x.add(&fx)
    } else {
        x.add(&fx.scale(scale))
    }
}

/// `x + ½·FF(LN(x))`.
pub fn feed_forward_residual(x: &Matrix, ff: &FeedForward, ln: &LayerNorm) -> Result<Matrix> {
    residual(x, 0.5, |x| ff.forward(&ln.forward(x)?))
}

/// `x + MHA(LN(x))`.
pub fn attention_residual(x: &Matrix, p: &BlockParams) -> Result<Matrix> {
    residual(x, 1.0, |x| {
        let h = p.ln_attn.forward(x)?;
        multi_head(&h, &h, &h, &p.attn_spec, &p.attn)
    })
}

/// `x + Conv(LN(x))`.
pub fn conv_residual(x: &Matrix, p: &BlockParams) -> Result<Matrix> {
    residual(x, 1.0, |x| conv_module_forward(&p.ln_conv.forward(x)?, &p.conv))
}

/// Macaron composition: half feed-forward, attention, convolution, half
/// feed-forward, each as a pre-normed residual, then a final layer norm.
pub fn lmec_block_forward(x: &Matrix, p: &BlockParams) -> Result<Matrix> {
    p.check_input(x)?;
    let x = feed_forward_residual(x, &p.ff1, &p.ln_ff1)?;
    let x = attention_residual(&x, p)?;
    let x = conv_residual(&x, p)?;
    let x = feed_forward_residual(&x, &p.ff2, &p.ln_ff2)?;
    p.ln_final.forward(&x)
}

/// A stack of blocks applied in sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub layers: Vec<BlockParams>,
}

impl Encoder {
    pub fn random(cfg: &BlockConfig, layers: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            layers: (0..layers)
                .map(|_| BlockParams::random(cfg, rng))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.layers
            .iter()
            .try_fold(x.clone(), |h, layer| lmec_block_forward(&h, layer))
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(BlockParams::tensors).collect()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(BlockParams::tensors_mut).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> BlockConfig {
        BlockConfig {
            d_model: 16,
            heads: 4,
            h_ffn: 24,
            max_len: 32,
            ..BlockConfig::default()
        }
    }

    #[test]
    fn activation_derivatives_match_central_differences() {
        let h = 1e-6;
        for act in GluActivation::ALL {
            for &x in &[-2.1, -0.3, 0.4, 1.7] {
                let fd = (act.eval(x + h) - act.eval(x - h)) / (2.0 * h);
                assert!((act.derivative(x) - fd).abs() < 1e-8, "{act} at {x}");
            }
        }
        assert_eq!(GluActivation::Gelu.eval(0.0), 0.0);
        assert_eq!(GluActivation::Swish.eval(0.0), 0.0);
        assert_eq!("gelu".parse::<GluActivation>().unwrap(), GluActivation::Gelu);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let x = Rng::new(0).normal_matrix(4, 10, 3.0);
        let y = LayerNorm::new(10).forward(&x).unwrap();
        for i in 0..4 {
            let mean: f64 = y.row(i).iter().sum::<f64>() / 10.0;
            let var: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_block_reduces_to_layer_norm() {
        for ff in [FeedForwardKind::Ffn, FeedForwardKind::Glu] {
            for pe in PeKind::ALL {
                let cfg = BlockConfig {
                    feed_forward: ff,
                    pe,
                    ..small_config()
                };
                let p = BlockParams::zeros(&cfg).unwrap();
                let x = Rng::new(1).normal_matrix(10, 16, 1.0);
                let y = lmec_block_forward(&x, &p).unwrap();
                assert_eq!(y, p.ln_final.forward(&x).unwrap(), "{ff:?} {pe}");
            }
        }
    }

    #[test]
    fn zero_output_projections_make_residuals_identity() {
        let cfg = small_config();
        let mut rng = Rng::new(2);
        let mut p = BlockParams::random(&cfg, &mut rng).unwrap();
        let x = rng.normal_matrix(12, 16, 1.0);

        p.attn.w_o = Matrix::zeros(16, 16);
        assert_eq!(attention_residual(&x, &p).unwrap(), x);

        p.conv.pw_out = Matrix::zeros(16, 16);
        assert_eq!(conv_residual(&x, &p).unwrap(), x);

        if let FeedForward::Glu(g) = &mut p.ff1 {
            g.w3 = Matrix::zeros(g.w3.rows(), 16);
        }
        assert_eq!(feed_forward_residual(&x, &p.ff1, &p.ln_ff1).unwrap(), x);
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let cfg = small_config();
        let p = BlockParams::random(&cfg, &mut Rng::new(3)).unwrap();
        let x = Rng::new(4).normal_matrix(20, 16, 1.0);
        let a = lmec_block_forward(&x, &p).unwrap();
        let b = lmec_block_forward(&x, &p).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(a.shape(), (20, 16));
        assert!(lmec_block_forward(&Rng::new(5).normal_matrix(3, 15, 1.0), &p).is_err());
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let cfg = BlockConfig {
            heads: 3,
            ..small_config()
        };
        assert!(matches!(
            BlockParams::random(&cfg, &mut Rng::new(0)),
            Err(LmecError::IndivisibleHeads { .. })
        ));
    }
}
