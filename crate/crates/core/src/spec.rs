//! Declarative architecture descriptions and their text manifest.
//!
//! A [`ModelSpec`] is an ordered list of layers with shapes resolved and the
//! CondConv configuration they were built from. The builder, the cost model
//! and checkpoints all consume it. The manifest is one `key=value` header per
//! line followed by one `layer` line per layer:
//!
//! ```text
//! condconv-manifest v1
//! name=toy
//! input=16x16x3
//! ...
//! layer kind=dw k=3 stride=2 pad=same cin=8 cout=8 block=1 cc=1
//! end
//! ```

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::condconv::ConvKind;
use crate::error::{Error, Result};
use crate::ops::Padding;
use crate::routing::{RouterConfig, RouterVariant};

pub const MANIFEST_MAGIC: &str = "condconv-manifest v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    /// Full `k x k` convolution.
    Conv,
    Depthwise,
    /// 1x1 convolution closing a separable block.
    Pointwise,
    GlobalPool,
    /// Classifier.
    Fc,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Depthwise => "dw",
            LayerKind::Pointwise => "pw",
            LayerKind::GlobalPool => "gap",
            LayerKind::Fc => "fc",
        }
    }

    /// The linear operator behind a parameterized layer.
    pub fn conv_kind(self) -> Option<ConvKind> {
        match self {
            LayerKind::Conv | LayerKind::Pointwise => Some(ConvKind::Standard),
            LayerKind::Depthwise => Some(ConvKind::Depthwise),
            LayerKind::Fc => Some(ConvKind::Fc),
            LayerKind::GlobalPool => None,
        }
    }

    /// Convolutions are followed by a per-channel scale/shift and ReLU.
    pub fn is_spatial(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Depthwise | LayerKind::Pointwise)
    }
}

impl FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv" => LayerKind::Conv,
            "dw" => LayerKind::Depthwise,
            "pw" => LayerKind::Pointwise,
            "gap" => LayerKind::GlobalPool,
            "fc" => LayerKind::Fc,
            other => return Err(Error::Format(format!("unknown layer kind {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub k: usize,
    pub stride: usize,
    pub padding: Padding,
    pub cin: usize,
    pub cout: usize,
    pub condconv: bool,
    /// Stem is block 0; separable blocks count from 1.
    pub block: usize,
    /// Per-block routing override.
    pub router: Option<RouterVariant>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, k: usize, stride: usize, cin: usize, cout: usize, block: usize) -> Self {
        Self {
            kind,
            k,
            stride,
            padding: Padding::Same,
            cin,
            cout,
            condconv: false,
            block,
            router: None,
        }
    }

    /// Shape of the (static or per-expert) weight tensor.
    pub fn kernel_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Conv | LayerKind::Pointwise => Some(vec![self.k, self.k, self.cin, self.cout]),
            LayerKind::Depthwise => Some(vec![self.k, self.k, self.cin, 1]),
            LayerKind::Fc => Some(vec![self.cin, self.cout]),
            LayerKind::GlobalPool => None,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.kernel_shape().map_or(0, |s| s.iter().product())
    }

    pub fn label(&self, index: usize) -> String {
        format!("{index:02}.{}{}", self.kind.as_str(), if self.condconv { "*" } else { "" })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    /// `(height, width, channels)`
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub width_multiplier: f64,
    pub num_experts: usize,
    pub condconv_begin_layer: Option<usize>,
    pub use_cc_classifier: bool,
    pub router: RouterConfig,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn has_condconv(&self) -> bool {
        self.layers.iter().any(|l| l.condconv)
    }

    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        let (h, w, c) = self.input;
        let begin = self
            .condconv_begin_layer
            .map_or_else(|| "none".to_string(), |b| b.to_string());
        writeln!(out, "{MANIFEST_MAGIC}").unwrap();
        writeln!(out, "name={}", self.name).unwrap();
        writeln!(out, "input={h}x{w}x{c}").unwrap();
        writeln!(out, "classes={}", self.num_classes).unwrap();
        writeln!(out, "width={}", self.width_multiplier).unwrap();
        writeln!(out, "experts={}", self.num_experts).unwrap();
        writeln!(out, "begin={begin}").unwrap();
        writeln!(out, "cc_classifier={}", u8::from(self.use_cc_classifier)).unwrap();
        writeln!(out, "router={}", self.router).unwrap();
        for l in &self.layers {
            write!(
                out,
                "layer kind={} k={} stride={} pad={} cin={} cout={} block={} cc={}",
                l.kind.as_str(),
                l.k,
                l.stride,
                l.padding.as_str(),
                l.cin,
                l.cout,
                l.block,
                u8::from(l.condconv)
            )
            .unwrap();
            if let Some(r) = l.router {
                write!(out, " router={r}").unwrap();
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format(format!("manifest line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_MAGIC => {}
            _ => return Err(Error::Format(format!("manifest must start with {MANIFEST_MAGIC:?}"))),
        }
        let mut spec = ModelSpec {
            name: String::new(),
            input: (0, 0, 0),
            num_classes: 0,
            width_multiplier: 1.0,
            num_experts: 1,
            condconv_begin_layer: None,
            use_cc_classifier: false,
            router: RouterConfig::default(),
            layers: Vec::new(),
        };
        let mut seen = [false; 4];
        let mut ended = false;
        for (no, raw) in lines {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "end" {
                ended = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("layer ") {
                spec.layers.push(parse_layer(rest).map_err(|e| bad(no, e.to_string()))?);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(no, format!("expected key=value, got {line:?}")))?;
            let num = |v: &str| v.parse::<usize>().map_err(|e| bad(no, format!("{key}: {e}")));
            match key {
                "name" => {
                    spec.name = value.to_string();
                    seen[0] = true;
                }
                "input" => {
                    let parts: Vec<_> = value.split('x').map(num).collect::<Result<_>>()?;
                    let [h, w, c] = parts[..] else {
                        return Err(bad(no, format!("input must be HxWxC, got {value:?}")));
                    };
                    spec.input = (h, w, c);
                    seen[1] = true;
                }
                "classes" => {
                    spec.num_classes = num(value)?;
                    seen[2] = true;
                }
                "width" => {
                    spec.width_multiplier = value
                        .parse()
                        .map_err(|e| bad(no, format!("width: {e}")))?
                }
                "experts" => spec.num_experts = num(value)?,
                "begin" => {
                    spec.condconv_begin_layer = match value {
                        "none" => None,
                        v => Some(num(v)?),
                    }
                }
                "cc_classifier" => spec.use_cc_classifier = parse_flag(value).map_err(|e| bad(no, e.to_string()))?,
                "router" => {
                    spec.router = value.parse().map_err(|e: Error| bad(no, e.to_string()))?;
                    seen[3] = true;
                }
                other => return Err(bad(no, format!("unknown key {other:?}"))),
            }
        }
        if !ended {
            return Err(Error::Format("manifest is missing its `end` line".into()));
        }
        if let Some(missing) = ["name", "input", "classes", "router"]
            .iter()
            .zip(seen)
            .find_map(|(k, s)| (!s).then_some(k))
        {
            return Err(Error::Format(format!("manifest is missing `{missing}`")));
        }
        Ok(spec)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_manifest())
    }
}

fn parse_flag(v: &str) -> Result<bool> {
    match v {
        "1" | "true" | "yes" => Ok(true),
        "0" | "false" | "no" => Ok(false),
        other => Err(Error::Format(format!("expected a flag, got {other:?}"))),
    }
}

fn parse_layer(rest: &str) -> Result<LayerSpec> {
    let mut layer = LayerSpec::new(LayerKind::Conv, 1, 1, 0, 0, 0);
    let mut have_kind = false;
    for field in rest.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("layer field {field:?} is not key=value")))?;
        let num = || v.parse::<usize>().map_err(|e| Error::Format(format!("{k}: {e}")));
        match k {
            "kind" => {
                layer.kind = v.parse()?;
                have_kind = true;
            }
            "k" => layer.k = num()?,
            "stride" => layer.stride = num()?,
            "pad" => layer.padding = v.parse()?,
            "cin" => layer.cin = num()?,
            "cout" => layer.cout = num()?,
            "block" => layer.block = num()?,
            "cc" => layer.condconv = parse_flag(v)?,
            "router" => layer.router = Some(v.parse()?),
            other => return Err(Error::Format(format!("unknown layer field {other:?}"))),
        }
    }
    if !have_kind {
        return Err(Error::Format("layer line without kind".into()));
    }
    Ok(layer)
}
