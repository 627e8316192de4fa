//! Routing-function variants and router sharing across blocks.
//!
//! Every variant ends in the routing activation and yields `alpha [B, n]`.
//! Variants differ only in router parameter shapes and in how many routers a
//! model instantiates; expert shapes never change.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::condconv::{activate, init_kernel, pooled_input, ConvKind, RoutingActivation, RoutingWeights};
use crate::error::{config_err, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::spec::ModelSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HiddenSize {
    Small,
    Medium,
    Large,
}

impl HiddenSize {
    pub fn multiplier(self) -> f64 {
        match self {
            HiddenSize::Small => 0.125,
            HiddenSize::Medium => 1.0,
            HiddenSize::Large => 8.0,
        }
    }

    /// `max(1, round(multiplier * input_dim))`
    pub fn width(self, input_dim: usize) -> usize {
        ((self.multiplier() * input_dim as f64).round() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum RouterVariant {
    /// One linear sigmoid router per block.
    #[default]
    PerBlock,
    /// One router at the anchor block whose weights every later layer reuses.
    Single,
    /// One router per pair of consecutive CondConv blocks.
    PartiallyShared,
    /// GAP -> FC -> ReLU -> FC -> sigmoid.
    Hidden(HiddenSize),
    /// Also consumes the previous router's weights.
    Hierarchical,
    /// Linear router with softmax instead of sigmoid.
    Softmax,
}

impl fmt::Display for RouterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RouterVariant::PerBlock => "per_block",
            RouterVariant::Single => "single",
            RouterVariant::PartiallyShared => "partially_shared",
            RouterVariant::Hidden(HiddenSize::Small) => "hidden_small",
            RouterVariant::Hidden(HiddenSize::Medium) => "hidden_medium",
            RouterVariant::Hidden(HiddenSize::Large) => "hidden_large",
            RouterVariant::Hierarchical => "hierarchical",
            RouterVariant::Softmax => "softmax",
        })
    }
}

impl FromStr for RouterVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "per_block" | "baseline" => RouterVariant::PerBlock,
            "single" => RouterVariant::Single,
            "partially_shared" => RouterVariant::PartiallyShared,
            "hidden_small" => RouterVariant::Hidden(HiddenSize::Small),
            "hidden_medium" => RouterVariant::Hidden(HiddenSize::Medium),
            "hidden_large" => RouterVariant::Hidden(HiddenSize::Large),
            "hierarchical" => RouterVariant::Hierarchical,
            "softmax" => RouterVariant::Softmax,
            other => return config_err(format!("unknown router variant {other:?}")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct RouterConfig {
    pub variant: RouterVariant,
    /// Block hosting the router of [`RouterVariant::Single`]; `None` picks the first CondConv block.
    pub anchor_layer: Option<usize>,
}

impl RouterConfig {
    pub fn new(variant: RouterVariant) -> Self {
        Self {
            variant,
            anchor_layer: None,
        }
    }
}

impl fmt::Display for RouterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.anchor_layer {
            Some(a) => write!(f, "{}@{a}", self.variant),
            None => write!(f, "{}", self.variant),
        }
    }
}

impl FromStr for RouterConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (variant, anchor) = match s.split_once('@') {
            Some((v, a)) => (
                v,
                Some(a.parse().map_err(|e| Error::Config(format!("router anchor {a:?}: {e}")))?),
            ),
            None => (s, None),
        };
        Ok(Self {
            variant: variant.parse()?,
            anchor_layer: anchor,
        })
    }
}

/// Resolved router architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RouterKind {
    Linear(RoutingActivation),
    Hidden { width: usize },
    /// Consumes `concat(GAP(x), alpha_prev)`; `extra` is the predecessor's expert count.
    Hierarchical { extra: usize },
}

impl RouterKind {
    pub fn param_shapes(self, input_dim: usize, n: usize) -> Vec<Vec<usize>> {
        match self {
            RouterKind::Linear(_) => vec![vec![input_dim, n]],
            RouterKind::Hidden { width } => vec![vec![input_dim, width], vec![width, n]],
            RouterKind::Hierarchical { extra } => vec![vec![input_dim + extra, n]],
        }
    }

    pub fn activation(self) -> RoutingActivation {
        match self {
            RouterKind::Linear(a) => a,
            _ => RoutingActivation::Sigmoid,
        }
    }

    /// Multiply-adds of the router matrices; pooling counts as additions only.
    pub fn madds(self, input_dim: usize, n: usize) -> u64 {
        self.param_shapes(input_dim, n)
            .iter()
            .map(|s| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// Routing logits to weights, given the pooled input and (for
    /// hierarchical routers) the predecessor's routing weights.
    pub fn forward<T: Scalar>(
        self,
        g: &mut Graph<T>,
        input: Var,
        previous: Option<Var>,
        params: &[Var],
    ) -> Result<Var> {
        let pooled = pooled_input(g, input)?;
        match self {
            RouterKind::Linear(act) => {
                let z = g.matmul(pooled, params[0])?;
                activate(g, z, act)
            }
            RouterKind::Hidden { .. } => {
                let h = g.matmul(pooled, params[0])?;
                let h = g.relu(h);
                let z = g.matmul(h, params[1])?;
                Ok(g.sigmoid(z))
            }
            RouterKind::Hierarchical { .. } => {
                let Some(prev) = previous else {
                    return config_err("hierarchical router evaluated without predecessor weights");
                };
                let joined = g.concat_cols(pooled, prev)?;
                let z = g.matmul(joined, params[0])?;
                Ok(g.sigmoid(z))
            }
        }
    }
}

/// A routing function with materialized parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Router<T> {
    pub kind: RouterKind,
    pub input_dim: usize,
    pub num_experts: usize,
    pub params: Vec<Tensor<T>>,
}

/// Router for `variant` on a `input_dim`-channel input feeding `n` experts.
/// `predecessor` is the expert count of the previous router, required by
/// hierarchical routing. The output matrix starts at zero; a hidden layer
/// gets a fan-in scaled random draw.
pub fn make_router<T: Scalar>(
    config: &RouterConfig,
    input_dim: usize,
    n: usize,
    predecessor: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Router<T>> {
    let kind = resolve_kind(config.variant, input_dim, predecessor)?;
    let shapes = kind.param_shapes(input_dim, n);
    let last = shapes.len() - 1;
    let params = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i == last {
                Tensor::zeros(s.clone())
            } else {
                init_kernel(ConvKind::Fc, s, rng)
            }
        })
        .collect::<Result<_>>()?;
    Ok(Router {
        kind,
        input_dim,
        num_experts: n,
        params,
    })
}

fn resolve_kind(variant: RouterVariant, input_dim: usize, predecessor: Option<usize>) -> Result<RouterKind> {
    Ok(match variant {
        RouterVariant::PerBlock | RouterVariant::Single | RouterVariant::PartiallyShared => {
            RouterKind::Linear(RoutingActivation::Sigmoid)
        }
        RouterVariant::Softmax => RouterKind::Linear(RoutingActivation::Softmax),
        RouterVariant::Hidden(size) => RouterKind::Hidden {
            width: size.width(input_dim),
        },
        RouterVariant::Hierarchical => match predecessor {
            Some(extra) => RouterKind::Hierarchical { extra },
            None => {
                return config_err(
                    "hierarchical routing requested at the first CondConv layer, which has no predecessor",
                )
            }
        },
    })
}

impl<T: Scalar> Router<T> {
    /// Tensor-level evaluation on `[B,H,W,C]` or pooled `[B,C]` input.
    pub fn evaluate(&self, x: &Tensor<T>, previous: Option<&RoutingWeights<T>>) -> Result<RoutingWeights<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pv = previous.map(|p| g.constant(p.alpha.clone()));
        let params: Vec<_> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let a = self.kind.forward(&mut g, xv, pv, &params)?;
        RoutingWeights::new(g.value(a).clone())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }
}

/// One router instance and the CondConv layers consuming its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterSlot {
    pub id: usize,
    /// Blocks sharing this router, in order.
    pub blocks: Vec<usize>,
    /// Layer whose input feeds the router (first layer of the first block).
    pub anchor_layer: usize,
    pub input_dim: usize,
    pub num_experts: usize,
    pub kind: RouterKind,
    /// Layer indices consuming the weights.
    pub consumers: Vec<usize>,
}

impl RouterSlot {
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.kind.param_shapes(self.input_dim, self.num_experts)
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn madds(&self) -> u64 {
        self.kind.madds(self.input_dim, self.num_experts)
    }
}

/// Router instances of a model and the layer -> router assignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouterPlan {
    pub slots: Vec<RouterSlot>,
    pub assignment: BTreeMap<usize, usize>,
}

impl RouterPlan {
    pub fn slot_of(&self, layer: usize) -> Option<&RouterSlot> {
        self.assignment.get(&layer).map(|&id| &self.slots[id])
    }

    /// Distinct router ids referenced by the assignment.
    pub fn router_ids(&self) -> Vec<usize> {
        let ids: std::collections::BTreeSet<_> = self.assignment.values().copied().collect();
        ids.into_iter().collect()
    }
}

struct CcBlock {
    block: usize,
    first_layer: usize,
    input_dim: usize,
    layers: Vec<usize>,
    router_override: Option<RouterVariant>,
}

fn condconv_blocks(spec: &ModelSpec) -> Vec<CcBlock> {
    let mut out: Vec<CcBlock> = Vec::new();
    for (i, l) in spec.layers.iter().enumerate().filter(|(_, l)| l.condconv) {
        match out.last_mut() {
            Some(b) if b.block == l.block => {
                b.layers.push(i);
                b.router_override = b.router_override.or(l.router);
            }
            _ => out.push(CcBlock {
                block: l.block,
                first_layer: i,
                input_dim: l.cin,
                layers: vec![i],
                router_override: l.router,
            }),
        }
    }
    out
}

/// Groups the CondConv blocks of `spec` into router slots for `config`.
///
/// - per-block style variants: one router per block;
/// - `Single`: one router at the anchor block reused by every later block;
/// - `PartiallyShared`: blocks paired in order from the first CondConv block,
///   the classifier counting as a block.
pub fn bind_shared_routers(spec: &ModelSpec, config: &RouterConfig) -> Result<RouterPlan> {
    let blocks = condconv_blocks(spec);
    let n = spec.num_experts;
    if blocks.is_empty() {
        return Ok(RouterPlan::default());
    }
    let groups: Vec<Vec<&CcBlock>> = match config.variant {
        RouterVariant::Single => {
            let anchor = config.anchor_layer.unwrap_or(blocks[0].block);
            let Some(pos) = blocks.iter().position(|b| b.block == anchor) else {
                return config_err(format!(
                    "single routing anchors at block {anchor}, which is not a CondConv block"
                ));
            };
            if pos != 0 {
                return config_err(format!(
                    "single routing anchors at block {anchor} but CondConv block {} precedes it",
                    blocks[0].block
                ));
            }
            vec![blocks.iter().collect()]
        }
        RouterVariant::PartiallyShared => blocks.chunks(2).map(|c| c.iter().collect()).collect(),
        _ => blocks.iter().map(|b| vec![b]).collect(),
    };

    let mut plan = RouterPlan::default();
    for (id, group) in groups.iter().enumerate() {
        let head = group[0];
        let variant = head.router_override.unwrap_or(config.variant);
        let kind = match (variant, id) {
            // a model-wide hierarchical default starts with a plain router
            (RouterVariant::Hierarchical, 0) if head.router_override.is_none() => {
                RouterKind::Linear(RoutingActivation::Sigmoid)
            }
            _ => resolve_kind(variant, head.input_dim, (id > 0).then_some(n)).map_err(|e| {
                Error::Config(format!("block {}: {e}", head.block))
            })?,
        };
        let consumers: Vec<usize> = group.iter().flat_map(|b| b.layers.iter().copied()).collect();
        for &layer in &consumers {
            plan.assignment.insert(layer, id);
        }
        plan.slots.push(RouterSlot {
            id,
            blocks: group.iter().map(|b| b.block).collect(),
            anchor_layer: head.first_layer,
            input_dim: head.input_dim,
            num_experts: n,
            kind,
            consumers,
        });
    }
    Ok(plan)
}

/// Checks that a router's output matrix is identically zero, in which case
/// its weights are input independent.
pub fn is_constant<T: Scalar>(params: &[Tensor<T>]) -> bool {
    params
        .last()
        .is_some_and(|p| p.data().iter().all(|&v| v == T::zero()))
}

/// Weights a constant router produces: `act(0)`.
pub fn constant_weights(kind: RouterKind, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return shape_err("router with zero experts");
    }
    Ok(match kind.activation() {
        RoutingActivation::Sigmoid => vec![0.5; n],
        RoutingActivation::Softmax => vec![1.0 / n as f64; n],
    })
}
