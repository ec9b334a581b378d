//! Attention engines: the softmax reference, the factored linear-attention
//! variants in either product order, and the multi-head wrapper.

mod engine;
mod multi_head;
mod variants;

use std::fmt;
use std::str::FromStr;

pub use engine::{
    evaluate, linear_attention_left, linear_attention_right, product_flops, similarity_matrix,
    SimilarityTerm,
};
pub use multi_head::{attention_heads, multi_head, AttentionProjections};
pub(crate) use multi_head::check_heads;
pub use variants::{
    a_rpe_attention, cosformer_attention, linear_attention, lmla_attention, mla_attention,
    npe_attention, similarity_terms, softmax_attention,
};

use crate::error::{LmecError, Result};
use crate::kernels::{ActivationKind, PeStyle};
use crate::numerics::Matrix;

/// Grouping used to evaluate `S·V`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProductOrder {
    /// `(Q′K′ᵀ)V`, quadratic in sequence length.
    Left,
    /// `Q′(K′ᵀV)`, linear in sequence length.
    Right,
}

impl ProductOrder {
    pub fn name(self) -> &'static str {
        match self {
            ProductOrder::Left => "left",
            ProductOrder::Right => "right",
        }
    }
}

impl fmt::Display for ProductOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProductOrder {
    type Err = LmecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(ProductOrder::Left),
            "right" => Ok(ProductOrder::Right),
            _ => Err(LmecError::Config(format!("unknown product order `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OrderPolicy {
    Left,
    Right,
    /// Left product for `N ≤ d_k`, right product otherwise.
    Dynamic,
}

impl FromStr for OrderPolicy {
    type Err = LmecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(OrderPolicy::Left),
            "right" => Ok(OrderPolicy::Right),
            "dynamic" => Ok(OrderPolicy::Dynamic),
            _ => Err(LmecError::Config(format!("unknown product order `{s}`"))),
        }
    }
}

impl fmt::Display for OrderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OrderPolicy::Left => "left",
            OrderPolicy::Right => "right",
            OrderPolicy::Dynamic => "dynamic",
        })
    }
}

impl From<ProductOrder> for OrderPolicy {
    fn from(o: ProductOrder) -> Self {
        match o {
            ProductOrder::Left => OrderPolicy::Left,
            ProductOrder::Right => OrderPolicy::Right,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearAttentionSpec {
    pub activation: ActivationKind,
    pub pe: PeStyle,
    pub order: OrderPolicy,
    pub normalize: bool,
    /// Per-head dimension.
    pub d_k: usize,
    pub heads: usize,
}

impl LinearAttentionSpec {
    pub fn model_dim(&self) -> usize {
        self.d_k * self.heads
    }

    /// Resolves the order policy for a sequence of length `n`.
    pub fn resolve_order(&self, n: usize) -> ProductOrder {
        match self.order {
            OrderPolicy::Left => ProductOrder::Left,
            OrderPolicy::Right => ProductOrder::Right,
            OrderPolicy::Dynamic => dynamic_dispatch(self, n),
        }
    }

    /// Single-head spec for head `h`, carrying that head's slice of any
    /// per-column position parameters.
    pub fn head(&self, h: usize) -> LinearAttentionSpec {
        let (start, end) = (h * self.d_k, (h + 1) * self.d_k);
        LinearAttentionSpec {
            pe: self.pe.column_slice(start, end),
            heads: 1,
            ..self.clone()
        }
    }

    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.pe.name(), self.activation, self.order)
    }
}

/// Left product when `n ≤ d_k`, right product when `n > d_k`.
pub fn dynamic_dispatch(spec: &LinearAttentionSpec, n: usize) -> ProductOrder {
    if n <= spec.d_k {
        ProductOrder::Left
    } else {
        ProductOrder::Right
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    pub values: Matrix,
    pub resolved_order: ProductOrder,
    pub flop_estimate: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(order: OrderPolicy, d_k: usize) -> LinearAttentionSpec {
        LinearAttentionSpec {
            activation: ActivationKind::EluPlusOne,
            pe: PeStyle::Npe,
            order,
            normalize: true,
            d_k,
            heads: 4,
        }
    }

    #[test]
    fn dispatch_rule() {
        let s = spec(OrderPolicy::Dynamic, 64);
        assert_eq!(dynamic_dispatch(&s, 64), ProductOrder::Left);
        assert_eq!(dynamic_dispatch(&s, 65), ProductOrder::Right);
        assert_eq!(dynamic_dispatch(&s, 1), ProductOrder::Left);
        assert_eq!(dynamic_dispatch(&s, 2000), ProductOrder::Right);
        assert_eq!(s.resolve_order(10), ProductOrder::Left);
        assert_eq!(spec(OrderPolicy::Right, 64).resolve_order(10), ProductOrder::Right);
        assert_eq!(spec(OrderPolicy::Left, 64).resolve_order(1000), ProductOrder::Left);
    }

    #[test]
    fn parse_orders() {
        assert_eq!("dynamic".parse::<OrderPolicy>().unwrap(), OrderPolicy::Dynamic);
        assert_eq!("right".parse::<ProductOrder>().unwrap(), ProductOrder::Right);
        assert!("middle".parse::<OrderPolicy>().is_err());
        assert_eq!(spec(OrderPolicy::Left, 8).label(), "npe-elu-left");
        assert_eq!(spec(OrderPolicy::Left, 8).model_dim(), 32);
    }
}
