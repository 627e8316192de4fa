//! Models with materialized parameters and their forward pass.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use crate::autodiff::{Graph, Var};
use crate::condconv::{init_kernel, mix_experts, ExecutionStrategy};
use crate::error::{config_err, Error, Result};
use crate::routing::{bind_shared_routers, constant_weights, is_constant, RouterConfig, RouterKind, RouterPlan};
use crate::scalar::Scalar;
use crate::spec::{LayerKind, ModelSpec};
use crate::tensor::Tensor;
use crate::train::regularize::{dropout_mask, expert_dropout_mask};
use crate::zoo::validate;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Kernel,
    Experts,
    Routing,
    Scale,
    Shift,
    Bias,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct LayerSlots {
    weight: Option<usize>,
    scale: Option<usize>,
    shift: Option<usize>,
    bias: Option<usize>,
}

/// Name, role and shape of every parameter a spec implies, in storage order.
pub fn param_layout(spec: &ModelSpec, plan: &RouterPlan) -> Vec<(String, ParamRole, Vec<usize>)> {
    let mut out = Vec::new();
    for (i, l) in spec.layers.iter().enumerate() {
        for slot in plan.slots.iter().filter(|s| s.anchor_layer == i) {
            for (j, shape) in slot.param_shapes().into_iter().enumerate() {
                out.push((format!("router{}.w{j}", slot.id), ParamRole::Routing, shape));
            }
        }
        let Some(kernel) = l.kernel_shape() else {
            continue;
        };
        let tag = format!("l{i:02}.{}", l.kind.as_str());
        if l.condconv {
            let mut shape = vec![spec.num_experts];
            shape.extend(kernel);
            out.push((format!("{tag}.experts"), ParamRole::Experts, shape));
        } else {
            out.push((format!("{tag}.kernel"), ParamRole::Kernel, kernel));
        }
        if l.kind.is_spatial() {
            out.push((format!("{tag}.scale"), ParamRole::Scale, vec![l.cout]));
            out.push((format!("{tag}.shift"), ParamRole::Shift, vec![l.cout]));
        } else {
            out.push((format!("{tag}.bias"), ParamRole::Bias, vec![l.cout]));
        }
    }
    out
}

/// Built architecture: spec, router plan and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    plan: RouterPlan,
    params: Vec<Param<T>>,
    layer_slots: Vec<LayerSlots>,
    router_slots: Vec<Vec<usize>>,
}

/// Training-time randomness for one forward pass.
pub struct Noise<'a> {
    pub rng: &'a mut dyn RngCore,
    /// Keep probability of dropout on the classifier input.
    pub keep_prob: f64,
    /// Probability of zeroing each routing weight.
    pub expert_dropout: f64,
}

pub struct ForwardConfig<'a> {
    pub strategy: ExecutionStrategy,
    /// Register parameters as differentiable leaves.
    pub differentiable: bool,
    pub noise: Option<Noise<'a>>,
}

impl ForwardConfig<'_> {
    pub fn eval(strategy: ExecutionStrategy) -> Self {
        Self {
            strategy,
            differentiable: false,
            noise: None,
        }
    }

    pub fn grad(strategy: ExecutionStrategy) -> Self {
        Self {
            strategy,
            differentiable: true,
            noise: None,
        }
    }
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: Var,
    /// One handle per model parameter, in storage order.
    pub params: Vec<Var>,
    /// Routing weights each CondConv layer consumed.
    pub layer_alpha: BTreeMap<usize, Var>,
    /// How often each router was evaluated.
    pub router_evaluations: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    /// Validates `spec` and draws fresh parameters.
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        let plan = checked_plan(&spec)?;
        let layout = param_layout(&spec, &plan);
        let mut values = Vec::with_capacity(layout.len());
        let mut it = layout.iter().peekable();
        while let Some((name, role, shape)) = it.next() {
            let value = match role {
                ParamRole::Kernel | ParamRole::Experts => {
                    let layer: usize = name[1..3].parse().expect("layer tag");
                    let kind = spec.layers[layer].kind.conv_kind().expect("parameterized layer");
                    if *role == ParamRole::Experts {
                        let parts = (0..shape[0])
                            .map(|_| init_kernel(kind, &shape[1..], rng))
                            .collect::<Result<Vec<_>>>()?;
                        Tensor::stack(&parts)?
                    } else {
                        init_kernel(kind, shape, rng)?
                    }
                }
                ParamRole::Routing => {
                    // the last matrix of each router starts at zero
                    let last = !it
                        .peek()
                        .is_some_and(|(next, _, _)| next.split('.').next() == name.split('.').next());
                    if last {
                        Tensor::zeros(shape.clone())?
                    } else {
                        init_kernel(crate::condconv::ConvKind::Fc, shape, rng)?
                    }
                }
                ParamRole::Scale => Tensor::ones(shape.clone())?,
                ParamRole::Shift | ParamRole::Bias => Tensor::zeros(shape.clone())?,
            };
            values.push((name.clone(), value));
        }
        Self::assemble(spec, plan, values)
    }

    /// Rebuilds a model from stored parameters; names and shapes must match the spec.
    pub fn from_params(spec: ModelSpec, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let plan = checked_plan(&spec)?;
        Self::assemble(spec, plan, params)
    }

    fn assemble(spec: ModelSpec, plan: RouterPlan, values: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let layout = param_layout(&spec, &plan);
        if layout.len() != values.len() {
            return Err(Error::Checkpoint(format!(
                "spec expects {} parameter tensors, got {}",
                layout.len(),
                values.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        let mut layer_slots = vec![LayerSlots::default(); spec.layers.len()];
        let mut router_slots = vec![Vec::new(); plan.slots.len()];
        for (idx, ((name, role, shape), (got_name, value))) in layout.into_iter().zip(values).enumerate() {
            if name != got_name || value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {idx}: expected {name} {shape:?}, got {got_name} {:?}",
                    value.shape()
                )));
            }
            if role == ParamRole::Routing {
                let id: usize = name["router".len()..name.find('.').expect("router name")]
                    .parse()
                    .expect("router id");
                router_slots[id].push(idx);
            } else {
                let layer: usize = name[1..3].parse().expect("layer tag");
                let s = &mut layer_slots[layer];
                match role {
                    ParamRole::Kernel | ParamRole::Experts => s.weight = Some(idx),
                    ParamRole::Scale => s.scale = Some(idx),
                    ParamRole::Shift => s.shift = Some(idx),
                    ParamRole::Bias => s.bias = Some(idx),
                    ParamRole::Routing => unreachable!(),
                }
            }
            params.push(Param { name, role, value });
        }
        Ok(Self {
            spec,
            plan,
            params,
            layer_slots,
            router_slots,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn plan(&self) -> &RouterPlan {
        &self.plan
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find_param(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_param(&mut self, index: usize, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[index];
        p.value.expect_same_shape(&value, &p.name)?;
        p.value = value;
        Ok(())
    }

    /// Indices of the weight (kernel or stacked experts) of each layer.
    pub fn layer_weight(&self, layer: usize) -> Option<usize> {
        self.layer_slots.get(layer).and_then(|s| s.weight)
    }

    /// Parameter indices of router `id`.
    pub fn router_params(&self, id: usize) -> &[usize] {
        &self.router_slots[id]
    }

    /// Layer indices of the CondConv layers, in order.
    pub fn condconv_layers(&self) -> Vec<usize> {
        self.plan.assignment.keys().copied().collect()
    }

    pub fn forward(&self, g: &mut Graph<T>, input: Var, cfg: &mut ForwardConfig<'_>) -> Result<ForwardPass> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if cfg.differentiable {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        let n_slots = self.plan.slots.len();
        let mut raw_alpha: Vec<Option<Var>> = vec![None; n_slots];
        let mut used_alpha: Vec<Option<Var>> = vec![None; n_slots];
        let mut evaluations = vec![0usize; n_slots];
        let mut layer_alpha = BTreeMap::new();
        let mut h = input;

        for (i, layer) in self.spec.layers.iter().enumerate() {
            let slots = &self.layer_slots[i];
            if layer.kind == LayerKind::GlobalPool {
                h = g.global_average_pool(h)?;
                continue;
            }
            if layer.kind == LayerKind::Fc {
                if let Some(noise) = cfg.noise.as_mut() {
                    if noise.keep_prob < 1.0 {
                        let mask = dropout_mask(g.shape(h), noise.keep_prob, &mut *noise.rng)?;
                        h = g.mul_const(h, mask)?;
                    }
                }
            }
            let weight = params[slots.weight.expect("parameterized layer")];
            let kind = layer.kind.conv_kind().expect("parameterized layer");
            let y = if layer.condconv {
                let slot = self.plan.slot_of(i).expect("CondConv layer has a router");
                let alpha = match used_alpha[slot.id] {
                    Some(a) => a,
                    None => {
                        let previous = match slot.kind {
                            RouterKind::Hierarchical { .. } => raw_alpha[slot.id - 1],
                            _ => None,
                        };
                        let rp: Vec<Var> = self.router_slots[slot.id].iter().map(|&p| params[p]).collect();
                        let a = slot.kind.forward(g, h, previous, &rp)?;
                        evaluations[slot.id] += 1;
                        raw_alpha[slot.id] = Some(a);
                        let a = match cfg.noise.as_mut() {
                            Some(noise) if noise.expert_dropout > 0.0 => {
                                let mask = expert_dropout_mask(g.shape(a), noise.expert_dropout, &mut *noise.rng)?;
                                g.mul_const(a, mask)?
                            }
                            _ => a,
                        };
                        used_alpha[slot.id] = Some(a);
                        a
                    }
                };
                layer_alpha.insert(i, alpha);
                mix_experts(g, h, weight, alpha, cfg.strategy, kind, layer.stride, layer.padding)?
            } else {
                match layer.kind {
                    LayerKind::Conv | LayerKind::Pointwise => g.conv2d(h, weight, layer.stride, layer.padding)?,
                    LayerKind::Depthwise => g.depthwise_conv2d(h, weight, layer.stride, layer.padding)?,
                    LayerKind::Fc => g.matmul(h, weight)?,
                    LayerKind::GlobalPool => unreachable!(),
                }
            };
            h = if layer.kind.is_spatial() {
                let scale = params[slots.scale.expect("norm scale")];
                let shift = params[slots.shift.expect("norm shift")];
                let z = g.channel_affine(y, scale, shift)?;
                g.relu(z)
            } else {
                g.add_bias(y, params[slots.bias.expect("classifier bias")])?
            };
        }
        Ok(ForwardPass {
            logits: h,
            params,
            layer_alpha,
            router_evaluations: evaluations,
        })
    }

    /// Inference-mode logits for a batch `[B,H,W,C]`.
    pub fn predict(&self, images: &Tensor<T>, strategy: ExecutionStrategy) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let pass = self.forward(&mut g, x, &mut ForwardConfig::eval(strategy))?;
        Ok(g.value(pass.logits).clone())
    }

    /// Inference-mode logits plus the routing weights of every CondConv layer.
    pub fn predict_with_routing(
        &self,
        images: &Tensor<T>,
        strategy: ExecutionStrategy,
    ) -> Result<(Tensor<T>, BTreeMap<usize, Tensor<T>>)> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let pass = self.forward(&mut g, x, &mut ForwardConfig::eval(strategy))?;
        let alphas = pass
            .layer_alpha
            .iter()
            .map(|(&l, &v)| (l, g.value(v).clone()))
            .collect();
        Ok((g.value(pass.logits).clone(), alphas))
    }

    /// The static model this one reduces to when every router ignores its
    /// input: each CondConv kernel becomes `sum_i act(0)_i * W_i`.
    pub fn static_equivalent(&self) -> Result<Model<T>> {
        let mut spec = self.spec.clone();
        for l in &mut spec.layers {
            l.condconv = false;
            l.router = None;
        }
        spec.condconv_begin_layer = None;
        spec.use_cc_classifier = false;
        spec.num_experts = 1;
        spec.router = RouterConfig::default();

        let mut coeffs: Vec<Vec<T>> = Vec::with_capacity(self.plan.slots.len());
        for slot in &self.plan.slots {
            let values: Vec<Tensor<T>> = self.router_slots[slot.id]
                .iter()
                .map(|&p| self.params[p].value.clone())
                .collect();
            if !is_constant(&values) {
                return config_err(format!(
                    "router {} depends on its input; only constant routing has a static equivalent",
                    slot.id
                ));
            }
            coeffs.push(
                constant_weights(slot.kind, slot.num_experts)?
                    .into_iter()
                    .map(T::of)
                    .collect(),
            );
        }

        let mut values = Vec::new();
        for p in &self.params {
            match p.role {
                ParamRole::Routing => {}
                ParamRole::Experts => {
                    let layer: usize = p.name[1..3].parse().expect("layer tag");
                    let c = &coeffs[self.plan.assignment[&layer]];
                    let per = p.value.len() / c.len();
                    let mut k = vec![T::zero(); per];
                    for (&a, w) in c.iter().zip(p.value.data().chunks_exact(per)) {
                        for (o, &v) in k.iter_mut().zip(w) {
                            *o += a * v;
                        }
                    }
                    let shape = p.value.shape()[1..].to_vec();
                    values.push((p.name.replace(".experts", ".kernel"), Tensor::new(shape, k)?));
                }
                _ => values.push((p.name.clone(), p.value.clone())),
            }
        }
        Model::from_params(spec, values)
    }
}

fn checked_plan(spec: &ModelSpec) -> Result<RouterPlan> {
    if let Err(violations) = validate(spec) {
        let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return config_err(format!("invalid model spec: {}", msg.join("; ")));
    }
    bind_shared_routers(spec, &spec.router)
}
