//! Finite-difference sweep over every attention variant, the projected
//! multi-head layer and both feed-forward forms.

use crate::attention::{
    linear_attention, multi_head, AttentionProjections, LinearAttentionSpec, OrderPolicy,
    ProductOrder,
};
use crate::blocks::{ffn_forward, glu_forward, FfnParams, GluActivation, GluParams};
use crate::error::{LmecError, Result};
use crate::kernels::{ActivationKind, PeKind, PeStyle};
use crate::numerics::{Matrix, Rng};

use super::{
    backward_attention, backward_ffn, backward_glu, backward_multi_head, compare,
    finite_diff_grad, finite_diff_grad_excluding_kinks, weighted_sum, GradReport, DEFAULT_EPS,
};

/// Normwise bound on the difference between the two orders' analytic
/// gradients.
pub const ORDER_AGREEMENT_TOLERANCE: f64 = 1e-9;

const SEQ: usize = 6;
const D_K: usize = 3;
const HEADS: usize = 2;
const MAX_LEN: usize = 8;
const FF_ROWS: usize = 3;
const FF_IN: usize = 4;
const GLU_HIDDEN: usize = 5;
const FFN_HIDDEN: usize = 6;
const MAX_DRAWS: usize = 200;
/// ReLU queries are centred here rather than at zero so that draws with at
/// least two active features per row are common.
const RELU_QUERY_SHIFT: f64 = 1.0;

const ORDERS: [ProductOrder; 2] = [ProductOrder::Left, ProductOrder::Right];

/// One unit of work in the sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Case {
    /// Single head on raw `q`, `k`, `v`.
    Attention {
        activation: ActivationKind,
        pe: PeKind,
        normalize: bool,
    },
    /// Two heads behind the query/key/value/output projections.
    MultiHead {
        activation: ActivationKind,
        pe: PeKind,
        normalize: bool,
    },
    Glu(GluActivation),
    Ffn(GluActivation),
}

impl Case {
    pub fn all() -> Vec<Case> {
        let mut out = Vec::new();
        for normalize in [true, false] {
            for activation in ActivationKind::ALL {
                for pe in PeKind::ALL {
                    out.push(Case::Attention { activation, pe, normalize });
                    out.push(Case::MultiHead { activation, pe, normalize });
                }
            }
        }
        out.extend(GluActivation::ALL.map(Case::Glu));
        out.extend(GluActivation::ALL.map(Case::Ffn));
        out
    }

    pub fn label(&self) -> String {
        let attn = |op: &str, a: &ActivationKind, pe: &PeKind, normalize: &bool| {
            let suffix = if *normalize { "" } else { "-unnormalized" };
            format!("{op}/{pe}-{a}{suffix}")
        };
        match self {
            Case::Attention { activation, pe, normalize } => attn("attention", activation, pe, normalize),
            Case::MultiHead { activation, pe, normalize } => attn("multi_head", activation, pe, normalize),
            Case::Glu(a) => format!("glu/{a}"),
            Case::Ffn(a) => format!("ffn/{a}"),
        }
    }

    /// Stream id mixed into the seed so every case draws its own instance.
    fn stream(&self) -> u64 {
        let idx = |a: ActivationKind| ActivationKind::ALL.iter().position(|&b| b == a).unwrap() as u64;
        let pidx = |p: PeKind| PeKind::ALL.iter().position(|&b| b == p).unwrap() as u64;
        let gidx = |g: GluActivation| GluActivation::ALL.iter().position(|&b| b == g).unwrap() as u64;
        match *self {
            Case::Attention { activation, pe, normalize } => {
                (1 << 12) | idx(activation) << 8 | pidx(pe) << 4 | normalize as u64
            }
            Case::MultiHead { activation, pe, normalize } => {
                (2 << 12) | idx(activation) << 8 | pidx(pe) << 4 | normalize as u64
            }
            Case::Glu(g) => (3 << 12) | gidx(g),
            Case::Ffn(g) => (4 << 12) | gidx(g),
        }
    }
}

/// Difference between the left- and right-order analytic gradients of one
/// tensor, `max|L − R| / max|L|`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderAgreement {
    pub op_name: String,
    pub tensor_name: String,
    pub rel_error: f64,
}

impl OrderAgreement {
    pub fn passes(&self) -> bool {
        self.rel_error < ORDER_AGREEMENT_TOLERANCE
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteOutcome {
    pub reports: Vec<GradReport>,
    pub order_agreement: Vec<OrderAgreement>,
}

impl SuiteOutcome {
    pub fn extend(&mut self, other: SuiteOutcome) {
        self.reports.extend(other.reports);
        self.order_agreement.extend(other.order_agreement);
    }

    pub fn passes(&self) -> bool {
        !self.reports.is_empty()
            && self.reports.iter().all(GradReport::passes)
            && self.order_agreement.iter().all(OrderAgreement::passes)
    }
}

/// Runs every case for one seed.
pub fn run_suite(seed: u64) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::default();
    for case in Case::all() {
        out.extend(run_case(case, seed)?);
    }
    Ok(out)
}

pub fn run_case(case: Case, seed: u64) -> Result<SuiteOutcome> {
    let mut rng = Rng::new(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ case.stream());
    let label = case.label();
    match case {
        Case::Attention { activation, pe, normalize } => {
            let spec = head_spec(activation, pe.instantiate(MAX_LEN, D_K, &mut rng), normalize, 1);
            let problem = draw(&mut rng, |rng| attention_problem(&spec, rng))?;
            check_both_orders(&label, &problem)
        }
        Case::MultiHead { activation, pe, normalize } => {
            let spec = head_spec(activation, pe.instantiate(MAX_LEN, D_K * HEADS, &mut rng), normalize, HEADS);
            let problem = draw(&mut rng, |rng| multi_head_problem(&spec, rng))?;
            check_both_orders(&label, &problem)
        }
        Case::Glu(activation) => {
            let problem = glu_problem(activation, &mut rng);
            let reports = check(&label, &problem, &problem.analytic(ProductOrder::Left)?)?;
            Ok(SuiteOutcome { reports, order_agreement: Vec::new() })
        }
        Case::Ffn(activation) => {
            let problem = ffn_problem(activation, &mut rng);
            let reports = check(&label, &problem, &problem.analytic(ProductOrder::Left)?)?;
            Ok(SuiteOutcome { reports, order_agreement: Vec::new() })
        }
    }
}

fn head_spec(activation: ActivationKind, pe: PeStyle, normalize: bool, heads: usize) -> LinearAttentionSpec {
    LinearAttentionSpec {
        activation,
        pe,
        order: OrderPolicy::Right,
        normalize,
        d_k: D_K,
        heads,
    }
}

type Eval<'a> = Box<dyn Fn(&[Matrix], ProductOrder) -> Result<f64> + 'a>;
type Regime<'a> = Box<dyn Fn(&[Matrix]) -> Result<Vec<bool>> + 'a>;
type Analytic<'a> = Box<dyn Fn(&[Matrix], ProductOrder) -> Result<Vec<Matrix>> + 'a>;

/// A scalar loss over named input tensors together with its analytic
/// gradient.
struct Problem<'a> {
    names: Vec<&'static str>,
    inputs: Vec<Matrix>,
    eval: Eval<'a>,
    analytic: Analytic<'a>,
    /// Kink side of every non-smooth activation input; `None` when smooth.
    regime: Option<Regime<'a>>,
}

impl Problem<'_> {
    fn analytic(&self, order: ProductOrder) -> Result<Vec<Matrix>> {
        (self.analytic)(&self.inputs, order)
    }
}

/// Draws instances until one is well posed. ReLU kernels can zero a whole
/// query row, which normalization rejects; those draws are discarded.
fn draw<'a>(
    rng: &mut Rng,
    mut make: impl FnMut(&mut Rng) -> Option<Problem<'a>>,
) -> Result<Problem<'a>> {
    for _ in 0..MAX_DRAWS {
        if let Some(p) = make(rng) {
            if ORDERS.iter().all(|&o| (p.eval)(&p.inputs, o).is_ok()) {
                return Ok(p);
            }
        }
    }
    Err(LmecError::Config(format!("no well-posed instance in {MAX_DRAWS} draws")))
}

fn signs(ms: &[&Matrix]) -> Vec<bool> {
    ms.iter().flat_map(|m| m.as_slice().iter().map(|&v| v > 0.0)).collect()
}

/// With normalization, a query row with a single active ReLU feature is
/// invariant to that feature's scale. Its exact gradient is zero while
/// central differences return rounding noise far above the relative-error
/// floor, so such draws are not used for the comparison.
fn has_scale_invariant_row(q: &Matrix, spec: &LinearAttentionSpec) -> bool {
    if spec.activation != ActivationKind::Relu || !spec.normalize {
        return false;
    }
    (0..q.rows()).any(|i| {
        q.row(i)
            .chunks(spec.d_k)
            .any(|head| head.iter().filter(|&&v| v > 0.0).count() == 1)
    })
}

fn query_shift(spec: &LinearAttentionSpec) -> f64 {
    if spec.activation == ActivationKind::Relu {
        RELU_QUERY_SHIFT
    } else {
        0.0
    }
}

fn with_pe_params(spec: &LinearAttentionSpec, params: Option<&Matrix>) -> LinearAttentionSpec {
    let mut s = spec.clone();
    if let (Some(dst), Some(src)) = (s.pe.params_mut(), params) {
        *dst = src.clone();
    }
    s
}

fn pe_name(spec: &LinearAttentionSpec) -> Option<&'static str> {
    match spec.pe {
        PeStyle::MApe { .. } => Some("w_ext"),
        PeStyle::LmApe(_) => Some("r"),
        _ => None,
    }
}

fn attention_problem<'a>(spec: &'a LinearAttentionSpec, rng: &mut Rng) -> Option<Problem<'a>> {
    let shift = query_shift(spec);
    let q = rng.normal_matrix(SEQ, D_K, 1.0).map(|v| v + shift);
    if has_scale_invariant_row(&q, spec) {
        return None;
    }
    let k = rng.normal_matrix(SEQ, D_K, 1.0);
    let v = rng.normal_matrix(SEQ, D_K, 1.0);
    let upstream = rng.normal_matrix(SEQ, D_K, 1.0);
    let mut names = vec!["q", "k", "v"];
    let mut inputs = vec![q, k, v];
    if let (Some(name), Some(p)) = (pe_name(spec), spec.pe.params()) {
        names.push(name);
        inputs.push(p.clone());
    }
    let up = upstream.clone();
    Some(Problem {
        names,
        inputs,
        eval: Box::new(move |x, order| {
            let s = LinearAttentionSpec {
                order: order.into(),
                ..with_pe_params(spec, x.get(3))
            };
            weighted_sum(&linear_attention(&x[0], &x[1], &x[2], &s)?.values, &up)
        }),
        analytic: Box::new(move |x, order| {
            let s = with_pe_params(spec, x.get(3));
            let g = backward_attention(&x[0], &x[1], &x[2], &s, order, &upstream)?;
            Ok([g.q, g.k, g.v].into_iter().chain(g.pe).collect())
        }),
        regime: spec
            .activation
            .has_kink()
            .then(|| Box::new(|x: &[Matrix]| Ok(signs(&[&x[0], &x[1]]))) as Regime),
    })
}

fn projections_from(x: &[Matrix]) -> AttentionProjections {
    AttentionProjections {
        w_q: x[3].clone(),
        b_q: x[4].clone(),
        w_k: x[5].clone(),
        b_k: x[6].clone(),
        w_v: x[7].clone(),
        b_v: x[8].clone(),
        w_o: x[9].clone(),
        b_o: x[10].clone(),
    }
}

fn multi_head_problem<'a>(spec: &'a LinearAttentionSpec, rng: &mut Rng) -> Option<Problem<'a>> {
    let d = D_K * HEADS;
    let x_q = rng.normal_matrix(SEQ, d, 1.0);
    let x_k = rng.normal_matrix(SEQ, d, 1.0);
    let x_v = rng.normal_matrix(SEQ, d, 1.0);
    let mut proj = AttentionProjections::random(d, rng);
    for b in [&mut proj.b_q, &mut proj.b_k, &mut proj.b_v, &mut proj.b_o] {
        *b = rng.normal_matrix(1, d, 0.5);
    }
    let shift = query_shift(spec);
    proj.b_q = proj.b_q.map(|v| v + shift);
    let q = x_q.matmul(&proj.w_q).ok()?.broadcast_row_add(&proj.b_q).ok()?;
    if has_scale_invariant_row(&q, spec) {
        return None;
    }
    let upstream = rng.normal_matrix(SEQ, d, 1.0);

    let mut names = vec!["x_q", "x_k", "x_v"];
    let mut inputs = vec![x_q, x_k, x_v];
    for (name, m) in proj.tensors() {
        names.push(name);
        inputs.push(m.clone());
    }
    if let (Some(name), Some(p)) = (pe_name(spec), spec.pe.params()) {
        names.push(name);
        inputs.push(p.clone());
    }
    let up = upstream.clone();
    Some(Problem {
        names,
        inputs,
        eval: Box::new(move |x, order| {
            let s = LinearAttentionSpec {
                order: order.into(),
                ..with_pe_params(spec, x.get(11))
            };
            weighted_sum(&multi_head(&x[0], &x[1], &x[2], &s, &projections_from(x))?, &up)
        }),
        analytic: Box::new(move |x, order| {
            let s = with_pe_params(spec, x.get(11));
            let g = backward_multi_head(&x[0], &x[1], &x[2], &s, &projections_from(x), order, &upstream)?;
            let mut out = vec![g.x_q, g.x_k, g.x_v];
            out.extend(g.projections.tensors().into_iter().map(|(_, m)| m.clone()));
            out.extend(g.pe);
            Ok(out)
        }),
        regime: spec.activation.has_kink().then(|| {
            Box::new(|x: &[Matrix]| {
                let q = x[0].matmul(&x[3])?.broadcast_row_add(&x[4])?;
                let k = x[1].matmul(&x[5])?.broadcast_row_add(&x[6])?;
                Ok(signs(&[&q, &k]))
            }) as Regime
        }),
    })
}

fn glu_problem(activation: GluActivation, rng: &mut Rng) -> Problem<'static> {
    let mut p = GluParams::random(FF_IN, GLU_HIDDEN, activation, rng);
    for b in [&mut p.b1, &mut p.b2, &mut p.b3] {
        *b = rng.normal_matrix(1, b.cols(), 0.5);
    }
    let x = rng.normal_matrix(FF_ROWS, FF_IN, 1.0);
    let upstream = rng.normal_matrix(FF_ROWS, FF_IN, 1.0);
    let params = move |x: &[Matrix]| GluParams {
        w1: x[1].clone(),
        b1: x[2].clone(),
        w2: x[3].clone(),
        b2: x[4].clone(),
        w3: x[5].clone(),
        b3: x[6].clone(),
        activation,
    };
    let mut names = vec!["x"];
    let mut inputs = vec![x];
    for (name, m) in p.tensors() {
        names.push(name);
        inputs.push(m.clone());
    }
    let up = upstream.clone();
    Problem {
        names,
        inputs,
        eval: Box::new(move |x, _| weighted_sum(&glu_forward(&x[0], &params(x))?, &up)),
        analytic: Box::new(move |x, _| {
            let g = backward_glu(&x[0], &params(x), &upstream)?;
            Ok(std::iter::once(g.x)
                .chain(g.params.tensors().into_iter().map(|(_, m)| m.clone()))
                .collect())
        }),
        regime: activation.has_kink().then(|| {
            Box::new(|x: &[Matrix]| Ok(signs(&[&x[0].matmul(&x[1])?.broadcast_row_add(&x[2])?]))) as Regime
        }),
    }
}

fn ffn_problem(activation: GluActivation, rng: &mut Rng) -> Problem<'static> {
    let mut p = FfnParams::random(FF_IN, FFN_HIDDEN, activation, rng);
    for b in [&mut p.b1, &mut p.b2] {
        *b = rng.normal_matrix(1, b.cols(), 0.5);
    }
    let x = rng.normal_matrix(FF_ROWS, FF_IN, 1.0);
    let upstream = rng.normal_matrix(FF_ROWS, FF_IN, 1.0);
    let params = move |x: &[Matrix]| FfnParams {
        w1: x[1].clone(),
        b1: x[2].clone(),
        w2: x[3].clone(),
        b2: x[4].clone(),
        activation,
    };
    let mut names = vec!["x"];
    let mut inputs = vec![x];
    for (name, m) in p.tensors() {
        names.push(name);
        inputs.push(m.clone());
    }
    let up = upstream.clone();
    Problem {
        names,
        inputs,
        eval: Box::new(move |x, _| weighted_sum(&ffn_forward(&x[0], &params(x))?, &up)),
        analytic: Box::new(move |x, _| {
            let g = backward_ffn(&x[0], &params(x), &upstream)?;
            Ok(std::iter::once(g.x)
                .chain(g.params.tensors().into_iter().map(|(_, m)| m.clone()))
                .collect())
        }),
        regime: activation.has_kink().then(|| {
            Box::new(|x: &[Matrix]| Ok(signs(&[&x[0].matmul(&x[1])?.broadcast_row_add(&x[2])?]))) as Regime
        }),
    }
}

/// Finite-difference check of every input of `problem` against `analytic`,
/// evaluating the loss in `order`.
fn check_in_order(
    op: &str,
    problem: &Problem,
    analytic: &[Matrix],
    order: ProductOrder,
) -> Result<Vec<GradReport>> {
    let mut reports = Vec::with_capacity(problem.inputs.len());
    for (slot, (name, grad)) in problem.names.iter().zip(analytic).enumerate() {
        let replaced = |x: &Matrix| {
            let mut inputs = problem.inputs.clone();
            inputs[slot] = x.clone();
            inputs
        };
        let f = |x: &Matrix| (problem.eval)(&replaced(x), order);
        let x = &problem.inputs[slot];
        let (numeric, skipped) = match &problem.regime {
            Some(regime) => finite_diff_grad_excluding_kinks(f, |x| regime(&replaced(x)), x, DEFAULT_EPS)?,
            None => (finite_diff_grad(f, x, DEFAULT_EPS)?, vec![false; x.len()]),
        };
        reports.push(compare(op, name, grad, &numeric, &skipped, DEFAULT_EPS)?);
    }
    Ok(reports)
}

fn check(op: &str, problem: &Problem, analytic: &[Matrix]) -> Result<Vec<GradReport>> {
    check_in_order(op, problem, analytic, ProductOrder::Left)
}

fn check_both_orders(label: &str, problem: &Problem) -> Result<SuiteOutcome> {
    let left = problem.analytic(ProductOrder::Left)?;
    let right = problem.analytic(ProductOrder::Right)?;
    let mut reports = check_in_order(&format!("{label}-left"), problem, &left, ProductOrder::Left)?;
    reports.extend(check_in_order(&format!("{label}-right"), problem, &right, ProductOrder::Right)?);
    let order_agreement = problem
        .names
        .iter()
        .zip(left.iter().zip(&right))
        .map(|(name, (l, r))| {
            let scale = l.max_abs();
            let diff = l.max_abs_diff(r)?;
            Ok(OrderAgreement {
                op_name: label.to_string(),
                tensor_name: name.to_string(),
                rel_error: if scale > 0.0 { diff / scale } else { diff },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteOutcome { reports, order_agreement })
}
