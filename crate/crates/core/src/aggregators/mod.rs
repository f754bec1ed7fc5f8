//! The candidate operations: eleven node aggregators, three layer
//! aggregators and two skip operations, each with its own parameters.
//!
//! Variant order is part of the contract: the index of a kind in its `ALL`
//! array is its coordinate in the matching architecture vector.

mod layer;
mod mlp;
mod node;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::autodiff::{TensorError, Var};

pub use layer::LayerAggregator;
pub use mlp::{MlpAggregator, MLP_DEPTHS, MLP_WIDTHS};
pub use node::{AggInput, AggOptions, NodeAggregator};

#[derive(Debug, Error)]
pub enum AggError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Dimension(String),
    #[error("layer aggregation needs at least one active layer")]
    EmptyActiveSet,
    #[error("MLP aggregator width {width} / depth {depth} is outside the grid (widths {MLP_WIDTHS:?}, depths {MLP_DEPTHS:?})")]
    OutOfGrid { width: usize, depth: usize },
    #[error("unknown {family} operation {name:?}; legal names: {legal}")]
    UnknownOp {
        family: &'static str,
        name: String,
        legal: String,
    },
}

macro_rules! op_enum {
    ($(#[$meta:meta])* $name:ident, $family:literal, { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&k| k == self).expect("listed variant")
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = AggError;

            fn from_str(s: &str) -> Result<Self, AggError> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|k| k.name() == s)
                    .ok_or_else(|| AggError::UnknownOp {
                        family: $family,
                        name: s.to_string(),
                        legal: Self::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", "),
                    })
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(self.name())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

op_enum!(
    /// Node aggregators, in architecture-vector order.
    NodeAggKind, "node aggregator", {
        SageSum => "SAGE-SUM",
        SageMean => "SAGE-MEAN",
        SageMax => "SAGE-MAX",
        Gcn => "GCN",
        Gat => "GAT",
        GatSym => "GAT-SYM",
        GatCos => "GAT-COS",
        GatLinear => "GAT-LINEAR",
        GatGenLinear => "GAT-GEN-LINEAR",
        Gin => "GIN",
        GeniePath => "GeniePath",
    }
);

op_enum!(
    /// Layer aggregators, in architecture-vector order.
    LayerAggKind, "layer aggregator", {
        Concat => "CONCAT",
        Max => "MAX",
        Lstm => "LSTM",
    }
);

op_enum!(
    /// Skip operations between an intermediate layer and the layer aggregator.
    SkipKind, "skip", {
        Identity => "IDENTITY",
        Zero => "ZERO",
    }
);

impl NodeAggKind {
    pub fn is_attention(self) -> bool {
        matches!(
            self,
            NodeAggKind::Gat
                | NodeAggKind::GatSym
                | NodeAggKind::GatCos
                | NodeAggKind::GatLinear
                | NodeAggKind::GatGenLinear
                | NodeAggKind::GeniePath
        )
    }
}

/// IDENTITY passes `h` through; ZERO yields a constant zero tensor of the
/// same shape, so no gradient flows back to `h`.
pub fn skip_apply<'t>(kind: SkipKind, h: Var<'t>) -> Var<'t> {
    match kind {
        SkipKind::Identity => h,
        SkipKind::Zero => h
            .tape()
            .constant(crate::autodiff::Tensor::zeros(&h.shape())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};

    #[test]
    fn cardinalities_and_names() {
        assert_eq!(NodeAggKind::ALL.len(), 11);
        assert_eq!(LayerAggKind::ALL.len(), 3);
        assert_eq!(SkipKind::ALL.len(), 2);
        assert_eq!(NodeAggKind::GeniePath.index(), 10);
        assert_eq!("GAT-GEN-LINEAR".parse::<NodeAggKind>().unwrap(), NodeAggKind::GatGenLinear);
        for k in NodeAggKind::ALL {
            assert_eq!(k.name().parse::<NodeAggKind>().unwrap(), *k);
        }
    }

    #[test]
    fn unknown_name_lists_legal_names() {
        let err = "GAT-FOO".parse::<NodeAggKind>().unwrap_err().to_string();
        assert!(err.contains("GAT-FOO") && err.contains("SAGE-MEAN") && err.contains("GeniePath"), "{err}");
    }

    #[test]
    fn serde_uses_table_names() {
        let json = serde_json::to_string(&[NodeAggKind::SageMean, NodeAggKind::GatGenLinear]).unwrap();
        assert_eq!(json, r#"["SAGE-MEAN","GAT-GEN-LINEAR"]"#);
        let back: Vec<SkipKind> = serde_json::from_str(r#"["IDENTITY","ZERO"]"#).unwrap();
        assert_eq!(back, vec![SkipKind::Identity, SkipKind::Zero]);
    }

    #[test]
    fn skip_operations() {
        let tape = Tape::new();
        let h = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        assert_eq!(skip_apply(SkipKind::Zero, h).value().data(), &[0.0, 0.0, 0.0]);
        let same = skip_apply(SkipKind::Identity, h);
        assert_eq!(same.id(), h.id());
        let zero = skip_apply(SkipKind::Zero, h);
        let loss = zero.add(h.scale(0.0)).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(h).unwrap().data(), &[0.0, 0.0, 0.0]);
    }
}
