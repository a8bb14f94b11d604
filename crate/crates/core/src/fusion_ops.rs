//! Candidate fusion operations applied at every intermediate cell node.
//!
//! All four kinds map two `C×H×W` inputs to one `C×H×W` output, so any
//! softmax mixture of them is well typed.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{uniform_tensor, ParamId, ParamStore};
use crate::tensor::{check_same_shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOpKind {
    WeightedSum,
    ConcatProject,
    Glu,
    GuidedAttention,
}

impl FusionOpKind {
    /// Canonical order; index `i` lines up with entry `i` of a β vector.
    pub const ALL: [FusionOpKind; 4] = [
        FusionOpKind::WeightedSum,
        FusionOpKind::ConcatProject,
        FusionOpKind::Glu,
        FusionOpKind::GuidedAttention,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionOpKind::WeightedSum => "weighted_sum",
            FusionOpKind::ConcatProject => "concat_project",
            FusionOpKind::Glu => "glu",
            FusionOpKind::GuidedAttention => "guided_attention",
        }
    }
}

impl fmt::Display for FusionOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionOpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown operation {s:?}")))
    }
}

/// Learnable parameters of one operation instance. Projection weights use
/// the `C_out × C_in` layout of [`crate::tensor::linear_map`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpParams {
    WeightedSum {
        lambda1: Tensor,
        lambda2: Tensor,
    },
    ConcatProject {
        weight: Tensor,
        bias: Tensor,
    },
    Glu {
        value_weight: Tensor,
        value_bias: Tensor,
        gate_weight: Tensor,
        gate_bias: Tensor,
    },
    GuidedAttention {
        gate_weight: Tensor,
        gate_bias: Tensor,
    },
}

impl OpParams {
    pub fn kind(&self) -> FusionOpKind {
        match self {
            OpParams::WeightedSum { .. } => FusionOpKind::WeightedSum,
            OpParams::ConcatProject { .. } => FusionOpKind::ConcatProject,
            OpParams::Glu { .. } => FusionOpKind::Glu,
            OpParams::GuidedAttention { .. } => FusionOpKind::GuidedAttention,
        }
    }

    /// Named tensors in a fixed order (the order [`apply_op`] expects).
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            OpParams::WeightedSum { lambda1, lambda2 } => {
                vec![("lambda1", lambda1), ("lambda2", lambda2)]
            }
            OpParams::ConcatProject { weight, bias } => vec![("w", weight), ("b", bias)],
            OpParams::Glu {
                value_weight,
                value_bias,
                gate_weight,
                gate_bias,
            } => vec![
                ("wv", value_weight),
                ("bv", value_bias),
                ("wg", gate_weight),
                ("bg", gate_bias),
            ],
            OpParams::GuidedAttention {
                gate_weight,
                gate_bias,
            } => vec![("wg", gate_weight), ("bg", gate_bias)],
        }
    }

    /// Registers the tensors under `prefix.<name>` and returns their ids.
    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Vec<ParamId> {
        self.tensors()
            .into_iter()
            .map(|(name, t)| store.add(format!("{prefix}.{name}"), t.clone()))
            .collect()
    }
}

pub fn init_params(kind: FusionOpKind, channels: usize, seed: u64) -> Result<OpParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with(kind, channels, &mut rng)
}

pub fn init_params_with(
    kind: FusionOpKind,
    channels: usize,
    rng: &mut impl rand::Rng,
) -> Result<OpParams> {
    if channels == 0 {
        return Err(Error::invalid("fusion op needs at least one channel"));
    }
    let c = channels;
    let s = 1.0 / ((2 * c) as f64).sqrt();
    let mut proj = || uniform_tensor(rng, &[c, 2 * c], s);
    Ok(match kind {
        FusionOpKind::WeightedSum => OpParams::WeightedSum {
            lambda1: Tensor::scalar(0.5),
            lambda2: Tensor::scalar(0.5),
        },
        FusionOpKind::ConcatProject => OpParams::ConcatProject {
            weight: proj(),
            bias: Tensor::zeros(&[c]),
        },
        FusionOpKind::Glu => {
            let value_weight = proj();
            let gate_weight = proj();
            OpParams::Glu {
                value_weight,
                value_bias: Tensor::zeros(&[c]),
                gate_weight,
                gate_bias: Tensor::zeros(&[c]),
            }
        }
        FusionOpKind::GuidedAttention => OpParams::GuidedAttention {
            gate_weight: proj(),
            gate_bias: Tensor::zeros(&[c]),
        },
    })
}

/// Applies `kind` to `(x1, x2)`. `params` are graph handles in the order of
/// [`OpParams::tensors`].
pub fn apply_op(
    graph: &mut Graph,
    kind: FusionOpKind,
    params: &[Var],
    x1: Var,
    x2: Var,
) -> Result<Var> {
    let (s1, s2) = (graph.value(x1), graph.value(x2));
    check_same_shape(s1, s2)?;
    let expected = match kind {
        FusionOpKind::WeightedSum | FusionOpKind::ConcatProject | FusionOpKind::GuidedAttention => 2,
        FusionOpKind::Glu => 4,
    };
    if params.len() != expected {
        return Err(Error::config(format!(
            "{kind} expects {expected} parameter tensors, got {}",
            params.len()
        )));
    }
    match kind {
        FusionOpKind::WeightedSum => {
            let a = graph.mul(x1, params[0])?;
            let b = graph.mul(x2, params[1])?;
            graph.add(a, b)
        }
        FusionOpKind::ConcatProject => {
            let z = graph.concat(x1, x2)?;
            graph.linear(z, params[0], params[1])
        }
        FusionOpKind::Glu => {
            let z = graph.concat(x1, x2)?;
            let value = graph.linear(z, params[0], params[1])?;
            let gate_pre = graph.linear(z, params[2], params[3])?;
            let gate = graph.sigmoid(gate_pre);
            graph.mul(value, gate)
        }
        FusionOpKind::GuidedAttention => {
            // x1 ⊙ A + x2 ⊙ (1 − A) written as x2 + (x1 − x2) ⊙ A.
            let z = graph.concat(x1, x2)?;
            let gate_pre = graph.linear(z, params[0], params[1])?;
            let gate = graph.sigmoid(gate_pre);
            let diff = graph.sub(x1, x2)?;
            let blend = graph.mul(diff, gate)?;
            graph.add(x2, blend)
        }
    }
}

/// Value-level convenience wrapper around [`apply_op`].
pub fn apply_op_values(params: &OpParams, x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .tensors()
        .into_iter()
        .map(|(_, t)| g.constant(t.clone()))
        .collect();
    let a = g.constant(x1.clone());
    let b = g.constant(x2.clone());
    let out = apply_op(&mut g, params.kind(), &vars, a, b)?;
    Ok(g.value(out).clone())
}
