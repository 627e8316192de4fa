//! Architecture builders and spec validation.

use std::fmt;

use crate::error::{config_err, Result};
use crate::ops::output_extent;
use crate::routing::{bind_shared_routers, RouterConfig, RouterVariant};
use crate::spec::{LayerKind, LayerSpec, ModelSpec};

/// `(depthwise stride, pointwise output channels)` of the 13 separable blocks.
pub const MOBILENET_V1_BLOCKS: [(usize, usize); 13] = [
    (1, 64),
    (2, 128),
    (1, 128),
    (2, 256),
    (1, 256),
    (2, 512),
    (1, 512),
    (1, 512),
    (1, 512),
    (1, 512),
    (1, 512),
    (2, 1024),
    (1, 1024),
];

/// Block id of the pooling layer; the classifier follows at `+1`.
pub const MOBILENET_V1_POOL_BLOCK: usize = 14;
pub const MOBILENET_V1_CLASSIFIER_BLOCK: usize = 15;

/// Default first CondConv block.
pub const DEFAULT_BEGIN_LAYER: usize = 7;

/// Scales a channel count and rounds to the nearest multiple of 8 (at least 8).
pub fn scale_channels(channels: usize, width_multiplier: f64) -> usize {
    let scaled = channels as f64 * width_multiplier / 8.0;
    ((scaled.round() as usize) * 8).max(8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MobileNetConfig {
    pub width_multiplier: f64,
    pub num_experts: usize,
    /// First CondConv block in `1..=15` (14 and 15 leave every separable block static).
    pub begin_layer: Option<usize>,
    pub use_cc_classifier: bool,
    pub router: RouterConfig,
    pub num_classes: usize,
    pub resolution: usize,
}

impl Default for MobileNetConfig {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
            num_experts: 1,
            begin_layer: None,
            use_cc_classifier: false,
            router: RouterConfig::default(),
            num_classes: 1000,
            resolution: 224,
        }
    }
}

impl MobileNetConfig {
    pub fn static_baseline(width_multiplier: f64) -> Self {
        Self {
            width_multiplier,
            ..Self::default()
        }
    }

    pub fn condconv(width_multiplier: f64, num_experts: usize, begin_layer: usize, use_cc_classifier: bool) -> Self {
        Self {
            width_multiplier,
            num_experts,
            begin_layer: Some(begin_layer),
            use_cc_classifier,
            ..Self::default()
        }
    }
}

fn check_begin(begin: Option<usize>, last_block: usize, cc_classifier: bool) -> Result<()> {
    match begin {
        Some(0) => config_err("begin layer counts from 1"),
        Some(b) if b > last_block + 2 => config_err(format!(
            "begin layer {b} is beyond the {last_block} blocks and the classifier ({})",
            last_block + 2
        )),
        None if cc_classifier => config_err("a CondConv classifier needs a begin layer"),
        _ => Ok(()),
    }
}

/// MobileNetV1: stem conv, 13 separable blocks, GAP and classifier.
///
/// Blocks at or after `begin_layer` use CondConv for both the depthwise and
/// the pointwise layer; the classifier is block 15.
pub fn mobilenet_v1_spec(cfg: &MobileNetConfig) -> Result<ModelSpec> {
    if cfg.width_multiplier <= 0.0 || !cfg.width_multiplier.is_finite() {
        return config_err(format!("width multiplier must be positive, got {}", cfg.width_multiplier));
    }
    check_begin(cfg.begin_layer, MOBILENET_V1_BLOCKS.len(), cfg.use_cc_classifier)?;
    let cc = |block: usize| cfg.begin_layer.is_some_and(|b| block >= b);
    let mut layers = Vec::new();
    let mut c = scale_channels(32, cfg.width_multiplier);
    layers.push(LayerSpec::new(LayerKind::Conv, 3, 2, 3, c, 0));
    for (i, &(stride, out)) in MOBILENET_V1_BLOCKS.iter().enumerate() {
        let block = i + 1;
        let co = scale_channels(out, cfg.width_multiplier);
        let mut dw = LayerSpec::new(LayerKind::Depthwise, 3, stride, c, c, block);
        let mut pw = LayerSpec::new(LayerKind::Pointwise, 1, 1, c, co, block);
        dw.condconv = cc(block);
        pw.condconv = cc(block);
        layers.push(dw);
        layers.push(pw);
        c = co;
    }
    layers.push(LayerSpec::new(LayerKind::GlobalPool, 1, 1, c, c, MOBILENET_V1_POOL_BLOCK));
    let mut fc = LayerSpec::new(LayerKind::Fc, 1, 1, c, cfg.num_classes, MOBILENET_V1_CLASSIFIER_BLOCK);
    fc.condconv = cfg.use_cc_classifier && cc(MOBILENET_V1_CLASSIFIER_BLOCK);
    layers.push(fc);
    let has_cc = layers.iter().any(|l| l.condconv);
    Ok(ModelSpec {
        name: "mobilenet_v1".into(),
        input: (cfg.resolution, cfg.resolution, 3),
        num_classes: cfg.num_classes,
        width_multiplier: cfg.width_multiplier,
        num_experts: if has_cc { cfg.num_experts } else { 1 },
        condconv_begin_layer: cfg.begin_layer,
        use_cc_classifier: cfg.use_cc_classifier,
        router: cfg.router,
        layers,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    /// `(height, width, channels)` of the input images.
    pub input: (usize, usize, usize),
    pub channels: usize,
    /// Separable blocks, 1..=4.
    pub blocks: usize,
    pub num_experts: usize,
    pub begin_layer: Option<usize>,
    pub use_cc_classifier: bool,
    pub router: RouterConfig,
    pub num_classes: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            input: (16, 16, 3),
            channels: 16,
            blocks: 2,
            num_experts: 4,
            begin_layer: Some(1),
            use_cc_classifier: true,
            router: RouterConfig::default(),
            num_classes: 4,
        }
    }
}

/// Small separable CNN for desk-scale runs: stem conv, `blocks` separable
/// blocks (odd blocks stride 2 and double the channels), GAP, classifier.
pub fn toy_cnn_spec(cfg: &ToyConfig) -> Result<ModelSpec> {
    if !(1..=4).contains(&cfg.blocks) {
        return config_err(format!("toy CNN takes 1 to 4 blocks, got {}", cfg.blocks));
    }
    if cfg.channels == 0 || cfg.num_classes == 0 {
        return config_err("toy CNN needs positive channels and classes");
    }
    check_begin(cfg.begin_layer, cfg.blocks, cfg.use_cc_classifier)?;
    let cc = |block: usize| cfg.begin_layer.is_some_and(|b| block >= b);
    let mut layers = vec![LayerSpec::new(LayerKind::Conv, 3, 1, cfg.input.2, cfg.channels, 0)];
    let mut c = cfg.channels;
    for block in 1..=cfg.blocks {
        let (stride, co) = if block % 2 == 1 { (2, c * 2) } else { (1, c) };
        let mut dw = LayerSpec::new(LayerKind::Depthwise, 3, stride, c, c, block);
        let mut pw = LayerSpec::new(LayerKind::Pointwise, 1, 1, c, co, block);
        dw.condconv = cc(block);
        pw.condconv = cc(block);
        layers.push(dw);
        layers.push(pw);
        c = co;
    }
    layers.push(LayerSpec::new(LayerKind::GlobalPool, 1, 1, c, c, cfg.blocks + 1));
    let mut fc = LayerSpec::new(LayerKind::Fc, 1, 1, c, cfg.num_classes, cfg.blocks + 2);
    fc.condconv = cfg.use_cc_classifier && cc(cfg.blocks + 2);
    layers.push(fc);
    let has_cc = layers.iter().any(|l| l.condconv);
    Ok(ModelSpec {
        name: "toy_cnn".into(),
        input: cfg.input,
        num_classes: cfg.num_classes,
        width_multiplier: 1.0,
        num_experts: if has_cc { cfg.num_experts } else { 1 },
        condconv_begin_layer: cfg.begin_layer,
        use_cc_classifier: cfg.use_cc_classifier,
        router: cfg.router,
        layers,
    })
}

/// A rule a [`ModelSpec`] breaks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub layer: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Spatial extent entering each layer, or the first layer whose shape
/// cannot be resolved.
pub fn resolve_extents(spec: &ModelSpec) -> std::result::Result<Vec<(usize, usize)>, Violation> {
    let (mut h, mut w) = (spec.input.0, spec.input.1);
    let mut out = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        out.push((h, w));
        if l.kind.is_spatial() {
            let (h0, w0) = (h, w);
            let fail = |e: crate::Error| Violation {
                layer: Some(i),
                message: format!("unresolved spatial shape ({h0}x{w0} input): {e}"),
            };
            h = output_extent(h0, l.k, l.stride, l.padding).map_err(fail)?;
            w = output_extent(w0, l.k, l.stride, l.padding).map_err(fail)?;
        } else if l.kind == LayerKind::GlobalPool {
            (h, w) = (1, 1);
        }
    }
    Ok(out)
}

/// Checks shape compatibility, CondConv placement and routing rules.
pub fn validate(spec: &ModelSpec) -> std::result::Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    let mut push = |layer: Option<usize>, message: String| v.push(Violation { layer, message });

    if spec.layers.is_empty() {
        push(None, "model has no layers".into());
        return Err(v);
    }
    if spec.num_experts == 0 {
        push(None, "expert count must be at least 1".into());
    }
    if spec.layers[0].cin != spec.input.2 {
        push(
            Some(0),
            format!("takes {} channels but the input has {}", spec.layers[0].cin, spec.input.2),
        );
    }
    let mut pooled = false;
    for (i, l) in spec.layers.iter().enumerate() {
        if l.k == 0 || l.stride == 0 || l.cin == 0 || l.cout == 0 {
            push(Some(i), "extents and stride must be positive".into());
        }
        if i > 0 {
            let prev = &spec.layers[i - 1];
            if l.cin != prev.cout {
                push(
                    Some(i),
                    format!("takes {} channels but layer {} produces {}", l.cin, i - 1, prev.cout),
                );
            }
            if l.block < prev.block {
                push(Some(i), format!("block {} follows block {}", l.block, prev.block));
            }
        }
        match l.kind {
            LayerKind::Depthwise | LayerKind::GlobalPool if l.cin != l.cout => {
                push(Some(i), format!("{} must preserve channels", l.kind.as_str()));
            }
            LayerKind::Pointwise if l.k != 1 => push(Some(i), "pointwise kernels are 1x1".into()),
            _ => {}
        }
        if l.kind == LayerKind::Depthwise {
            let next = spec.layers.get(i + 1);
            if !next.is_some_and(|n| n.kind == LayerKind::Pointwise && n.block == l.block) {
                push(Some(i), "depthwise layer must be followed by a pointwise layer of the same block".into());
            }
        }
        if l.kind == LayerKind::Pointwise
            && i > 0
            && spec.layers[i - 1].kind == LayerKind::Depthwise
            && spec.layers[i - 1].condconv != l.condconv
        {
            push(Some(i), "layers of one separable block must agree on CondConv".into());
        }
        if l.kind.is_spatial() && pooled {
            push(Some(i), "spatial layer after global pooling".into());
        }
        if l.kind == LayerKind::GlobalPool {
            pooled = true;
        }
        if l.kind == LayerKind::Fc && !pooled {
            push(Some(i), "classifier needs pooled features".into());
        }
        if l.condconv {
            match (l.kind, spec.condconv_begin_layer) {
                (LayerKind::GlobalPool, _) => push(Some(i), "pooling has no kernel to condition".into()),
                (_, None) => push(Some(i), "CondConv layer in a model without a begin layer".into()),
                (_, Some(b)) if l.block < b => push(
                    Some(i),
                    format!("CondConv in block {} before begin layer {b}", l.block),
                ),
                _ => {}
            }
            if l.kind == LayerKind::Fc && !spec.use_cc_classifier {
                push(Some(i), "CondConv classifier without the cc_classifier flag".into());
            }
        } else if l.kind == LayerKind::Fc && spec.use_cc_classifier && spec.condconv_begin_layer.is_some_and(|b| l.block >= b) {
            push(Some(i), "cc_classifier is set but the classifier is static".into());
        }
        if l.router.is_some() && !l.condconv {
            push(Some(i), "router override on a static layer".into());
        }
    }
    match spec.layers.last() {
        Some(l) if l.kind == LayerKind::Fc && l.cout == spec.num_classes => {}
        _ => push(None, format!("last layer must be a classifier with {} outputs", spec.num_classes)),
    }
    if let Err(e) = resolve_extents(spec) {
        v.push(e);
    }
    let first_cc_block = spec.layers.iter().find(|l| l.condconv).map(|l| l.block);
    for (i, l) in spec.layers.iter().enumerate() {
        if l.router == Some(RouterVariant::Hierarchical) && Some(l.block) == first_cc_block {
            v.push(Violation {
                layer: Some(i),
                message: "hierarchical router at the first CondConv block has no predecessor".into(),
            });
        }
    }
    if v.is_empty() {
        if let Err(e) = bind_shared_routers(spec, &spec.router) {
            v.push(Violation {
                layer: None,
                message: e.to_string(),
            });
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
