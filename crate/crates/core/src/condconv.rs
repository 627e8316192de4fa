//! Conditionally parameterized convolution.
//!
//! A layer holds `n` expert kernels shaped exactly like the static kernel it
//! replaces plus a routing matrix. Each example gets its own kernel
//! `sum_i alpha_i * W_i` where `alpha = act(GAP(x) * R)`.
//!
//! Two execution strategies compute the same pre-activation output:
//! [`ExecutionStrategy::Fused`] materializes one kernel per example and runs a
//! single batch-1 convolution, [`ExecutionStrategy::BranchedMoE`] convolves the
//! whole batch with every expert and sums the branches weighted by `alpha`.
//! The layer nonlinearity is applied by the caller.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{config_err, shape_err, Result};
use crate::ops::Padding;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Squashing applied to the routing logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RoutingActivation {
    Sigmoid,
    Softmax,
}

/// Which linear operator the experts parameterize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvKind {
    /// Experts `[k,k,Cin,Cout]`, input `[B,H,W,Cin]`.
    Standard,
    /// Experts `[k,k,C,1]`, input `[B,H,W,C]`.
    Depthwise,
    /// Experts `[Cin,Cout]`, input `[B,Cin]` (a 1x1 CondConv on pooled features).
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum ExecutionStrategy {
    Fused,
    BranchedMoE,
    #[default]
    Auto,
}

impl ExecutionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            ExecutionStrategy::Fused => "fused",
            ExecutionStrategy::BranchedMoE => "branched",
            ExecutionStrategy::Auto => "auto",
        }
    }
}

impl std::str::FromStr for ExecutionStrategy {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Self::Fused),
            "branched" | "moe" | "branched_moe" => Ok(Self::BranchedMoE),
            "auto" => Ok(Self::Auto),
            other => config_err(format!("unknown execution strategy {other:?}")),
        }
    }
}

/// Largest expert count trained with the branched formulation under `Auto`.
pub const BRANCHED_MAX_EXPERTS: usize = 4;

/// Resolves `Auto`: branched for `n <= 4`, fused above. Explicit requests pass through.
pub fn select_strategy(n: usize, requested: ExecutionStrategy) -> ExecutionStrategy {
    match requested {
        ExecutionStrategy::Auto if n <= BRANCHED_MAX_EXPERTS => ExecutionStrategy::BranchedMoE,
        ExecutionStrategy::Auto => ExecutionStrategy::Fused,
        explicit => explicit,
    }
}

/// The experts of one CondConv layer and its routing matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank<T> {
    /// Experts stacked along a new leading axis: `[n, ..kernel]`.
    experts: Tensor<T>,
    /// `[Cin_route, n]`
    routing: Tensor<T>,
}

impl<T: Scalar> ExpertBank<T> {
    pub fn new(experts: &[Tensor<T>], routing: Tensor<T>) -> Result<Self> {
        Self::from_stacked(Tensor::stack(experts)?, routing)
    }

    pub fn from_stacked(experts: Tensor<T>, routing: Tensor<T>) -> Result<Self> {
        if experts.rank() < 2 {
            return shape_err(format!(
                "stacked experts need shape [n, ..], got {:?}",
                experts.shape()
            ));
        }
        routing.expect_rank(2, "routing matrix")?;
        if routing.shape()[1] != experts.shape()[0] {
            return shape_err(format!(
                "routing matrix {:?} has {} columns but there are {} experts",
                routing.shape(),
                routing.shape()[1],
                experts.shape()[0]
            ));
        }
        Ok(Self { experts, routing })
    }

    /// Experts drawn from the fan-in scaled uniform initializer of the
    /// static kernel; routing starts at zero.
    pub fn init(
        kind: ConvKind,
        kernel_shape: &[usize],
        n: usize,
        routed_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n == 0 {
            return config_err("an expert bank needs at least one expert");
        }
        let experts: Vec<_> = (0..n)
            .map(|_| init_kernel(kind, kernel_shape, rng))
            .collect::<Result<_>>()?;
        Self::new(&experts, Tensor::zeros(vec![routed_channels, n])?)
    }

    pub fn num_experts(&self) -> usize {
        self.experts.shape()[0]
    }

    pub fn expert_shape(&self) -> &[usize] {
        &self.experts.shape()[1..]
    }

    pub fn expert(&self, i: usize) -> Result<Tensor<T>> {
        self.experts.index_first(i)
    }

    pub fn stacked(&self) -> &Tensor<T> {
        &self.experts
    }

    pub fn routing(&self) -> &Tensor<T> {
        &self.routing
    }

    pub fn params_per_expert(&self) -> usize {
        self.experts.len() / self.num_experts()
    }
}

/// Number of inputs feeding one output of a kernel of the given kind.
pub fn fan_in(kind: ConvKind, shape: &[usize]) -> usize {
    match kind {
        ConvKind::Fc => shape[0],
        ConvKind::Depthwise => shape[0] * shape[1],
        ConvKind::Standard => shape[..shape.len() - 1].iter().product(),
    }
}

/// He-style uniform draw on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
pub fn init_kernel<T: Scalar>(kind: ConvKind, shape: &[usize], rng: &mut impl Rng) -> Result<Tensor<T>> {
    let limit = (6.0 / fan_in(kind, shape).max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-limit..limit)))
}

/// Per-example expert weights, `[B, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingWeights<T> {
    pub alpha: Tensor<T>,
}

impl<T: Scalar> RoutingWeights<T> {
    pub fn new(alpha: Tensor<T>) -> Result<Self> {
        alpha.expect_rank(2, "routing weights")?;
        Ok(Self { alpha })
    }

    pub fn batch(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn num_experts(&self) -> usize {
        self.alpha.shape()[1]
    }

    pub fn row(&self, b: usize) -> &[T] {
        let n = self.num_experts();
        &self.alpha.data()[b * n..(b + 1) * n]
    }
}

// ---------------------------------------------------------------------------
// graph-level building blocks

/// Pooled routing input: GAP for feature maps, identity for `[B, C]` vectors.
pub fn pooled_input<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    match g.shape(x).len() {
        4 => g.global_average_pool(x),
        2 => Ok(x),
        _ => shape_err(format!(
            "routing input must be [B,H,W,C] or [B,C], got {:?}",
            g.shape(x)
        )),
    }
}

pub fn activate<T: Scalar>(g: &mut Graph<T>, logits: Var, activation: RoutingActivation) -> Result<Var> {
    match activation {
        RoutingActivation::Sigmoid => Ok(g.sigmoid(logits)),
        RoutingActivation::Softmax => g.softmax(logits),
    }
}

/// `act(GAP(x) * R)` with no bias.
pub fn route_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    routing: Var,
    activation: RoutingActivation,
) -> Result<Var> {
    let pooled = pooled_input(g, x)?;
    let (c, rows) = (g.shape(pooled)[1], g.shape(routing)[0]);
    if c != rows {
        return shape_err(format!(
            "routed input has {c} channels but routing matrix {:?} expects {rows}",
            g.shape(routing)
        ));
    }
    let logits = g.matmul(pooled, routing)?;
    activate(g, logits, activation)
}

fn expect_kind(kind: ConvKind, expert_shape: &[usize], input_shape: &[usize]) -> Result<()> {
    let ok = match kind {
        ConvKind::Standard => expert_shape.len() == 4 && input_shape.len() == 4,
        ConvKind::Depthwise => {
            expert_shape.len() == 4 && expert_shape[3] == 1 && input_shape.len() == 4
        }
        ConvKind::Fc => expert_shape.len() == 2 && input_shape.len() == 2,
    };
    if ok {
        Ok(())
    } else {
        config_err(format!(
            "{kind:?} CondConv cannot use experts {expert_shape:?} on input {input_shape:?}"
        ))
    }
}

fn apply_kernel<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    kernel: Var,
    kind: ConvKind,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    match kind {
        ConvKind::Standard => g.conv2d(x, kernel, stride, padding),
        ConvKind::Depthwise => g.depthwise_conv2d(x, kernel, stride, padding),
        ConvKind::Fc => g.matmul(x, kernel),
    }
}

/// Pre-activation CondConv output given routing weights `alpha [B, n]` and
/// stacked `experts [n, ..kernel]`.
#[allow(clippy::too_many_arguments)]
pub fn mix_experts<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    experts: Var,
    alpha: Var,
    strategy: ExecutionStrategy,
    kind: ConvKind,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    let expert_shape = g.shape(experts)[1..].to_vec();
    let n = g.shape(experts)[0];
    expect_kind(kind, &expert_shape, g.shape(x))?;
    let batch = g.shape(x)[0];
    if g.shape(alpha) != [batch, n] {
        return shape_err(format!(
            "routing weights {:?} do not match batch {batch} and {n} experts",
            g.shape(alpha)
        ));
    }
    match select_strategy(n, strategy) {
        ExecutionStrategy::Fused => {
            let per_expert: usize = expert_shape.iter().product();
            let flat = g.reshape(experts, vec![n, per_expert])?;
            let kernels = g.matmul(alpha, flat)?;
            let mut outs = Vec::with_capacity(batch);
            for b in 0..batch {
                let row = g.slice_batch(kernels, b)?;
                let kernel = g.reshape(row, expert_shape.clone())?;
                let xb = g.slice_batch(x, b)?;
                outs.push(apply_kernel(g, xb, kernel, kind, stride, padding)?);
            }
            g.concat_batch(&outs)
        }
        ExecutionStrategy::BranchedMoE => {
            let mut total: Option<Var> = None;
            for i in 0..n {
                let w = g.index_first(experts, i)?;
                let branch = apply_kernel(g, x, w, kind, stride, padding)?;
                let weighted = g.scale_by_column(branch, alpha, i)?;
                total = Some(match total {
                    Some(t) => g.add(t, weighted)?,
                    None => weighted,
                });
            }
            Ok(total.expect("n >= 1"))
        }
        ExecutionStrategy::Auto => unreachable!("select_strategy resolves Auto"),
    }
}

// ---------------------------------------------------------------------------
// tensor-level API

/// Routing weights for a batch: `act(GAP(x) R)`.
pub fn route<T: Scalar>(
    x: &Tensor<T>,
    routing: &Tensor<T>,
    activation: RoutingActivation,
) -> Result<RoutingWeights<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let rv = g.constant(routing.clone());
    let a = route_graph(&mut g, xv, rv, activation)?;
    RoutingWeights::new(g.value(a).clone())
}

/// `sum_i alpha[i] * W_i` for one example.
pub fn combine_kernels<T: Scalar>(alpha: &[T], bank: &ExpertBank<T>) -> Result<Tensor<T>> {
    let n = bank.num_experts();
    if alpha.len() != n {
        return shape_err(format!(
            "{} routing weights given for {n} experts",
            alpha.len()
        ));
    }
    let per = bank.params_per_expert();
    let mut out = vec![T::zero(); per];
    for (&a, w) in alpha.iter().zip(bank.stacked().data().chunks_exact(per)) {
        for (o, &v) in out.iter_mut().zip(w) {
            *o += a * v;
        }
    }
    Tensor::new(bank.expert_shape().to_vec(), out)
}

/// Routes `x` through the bank's routing matrix and applies the mixed experts.
pub fn condconv_forward<T: Scalar>(
    x: &Tensor<T>,
    bank: &ExpertBank<T>,
    activation: RoutingActivation,
    strategy: ExecutionStrategy,
    kind: ConvKind,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let alpha = route(x, bank.routing(), activation)?;
    condconv_with_weights(x, bank, &alpha, strategy, kind, stride, padding)
}

/// As [`condconv_forward`] with externally supplied routing weights.
pub fn condconv_with_weights<T: Scalar>(
    x: &Tensor<T>,
    bank: &ExpertBank<T>,
    alpha: &RoutingWeights<T>,
    strategy: ExecutionStrategy,
    kind: ConvKind,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ev = g.constant(bank.stacked().clone());
    let av = g.constant(alpha.alpha.clone());
    let y = mix_experts(&mut g, xv, ev, av, strategy, kind, stride, padding)?;
    Ok(g.value(y).clone())
}

/// 1x1 CondConv replacing a fully-connected layer: `x [B,C]`, experts `[C, D]`.
pub fn condconv_fc<T: Scalar>(
    x: &Tensor<T>,
    bank: &ExpertBank<T>,
    activation: RoutingActivation,
    strategy: ExecutionStrategy,
) -> Result<Tensor<T>> {
    condconv_forward(x, bank, activation, strategy, ConvKind::Fc, 1, Padding::Valid)
}
