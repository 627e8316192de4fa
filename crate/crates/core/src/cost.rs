//! Multiply-add and parameter accounting.
//!
//! One multiply-accumulate counts as one MADD. Pooling, bias, the per-channel
//! affine and activations are free.

use std::fmt::Write as _;

use crate::condconv::ConvKind;
use crate::error::{config_err, Result};
use crate::spec::{LayerKind, ModelSpec};
use crate::zoo::resolve_extents;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Breakdown {
    /// One convolution (or matrix product) with the combined kernel.
    pub conv: u64,
    /// Router matrices.
    pub routing: u64,
    /// Forming `sum_i alpha_i W_i`.
    pub combine: u64,
    pub other: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub madds: u64,
    pub params: u64,
    pub breakdown: Breakdown,
}

impl LayerCost {
    fn from_parts(breakdown: Breakdown, params: u64) -> Self {
        let Breakdown {
            conv,
            routing,
            combine,
            other,
        } = breakdown;
        Self {
            madds: conv + routing + combine + other,
            params,
            breakdown,
        }
    }

    pub fn accumulate(&mut self, other: &LayerCost) {
        self.madds += other.madds;
        self.params += other.params;
        self.breakdown.conv += other.breakdown.conv;
        self.breakdown.routing += other.breakdown.routing;
        self.breakdown.combine += other.breakdown.combine;
        self.breakdown.other += other.breakdown.other;
    }
}

/// Weights of one (static or expert) kernel.
pub fn params_per_expert(kind: ConvKind, k: usize, cin: usize, cout: usize) -> u64 {
    let (k, cin, cout) = (k as u64, cin as u64, cout as u64);
    match kind {
        ConvKind::Standard => k * k * cin * cout,
        ConvKind::Depthwise => k * k * cin,
        ConvKind::Fc => cin * cout,
    }
}

/// Static layer producing an `out_h x out_w` map (ignored for `Fc`).
pub fn conv_madds(kind: ConvKind, k: usize, cin: usize, cout: usize, out_h: usize, out_w: usize) -> LayerCost {
    let per = params_per_expert(kind, k, cin, cout);
    let positions = match kind {
        ConvKind::Fc => 1,
        _ => (out_h * out_w) as u64,
    };
    LayerCost::from_parts(
        Breakdown {
            conv: positions * per,
            ..Breakdown::default()
        },
        per,
    )
}

/// CondConv layer with `n` experts and a linear router over
/// `routed_channels` pooled inputs.
#[allow(clippy::too_many_arguments)]
pub fn condconv_madds(
    kind: ConvKind,
    k: usize,
    cin: usize,
    cout: usize,
    out_h: usize,
    out_w: usize,
    n: usize,
    routed_channels: usize,
) -> LayerCost {
    let base = conv_madds(kind, k, cin, cout, out_h, out_w);
    let per = params_per_expert(kind, k, cin, cout);
    let (n, routed) = (n as u64, routed_channels as u64);
    LayerCost::from_parts(
        Breakdown {
            conv: base.breakdown.conv,
            routing: routed * n,
            combine: n * per,
            other: 0,
        },
        n * per + routed * n,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub index: usize,
    pub label: String,
    pub block: usize,
    /// Output extent.
    pub out_hw: (usize, usize),
    pub cost: LayerCost,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub model: String,
    pub rows: Vec<LayerRow>,
    pub total: LayerCost,
}

/// Per-layer and total cost of `spec`, optionally at another input resolution.
///
/// Router cost is charged once per router, to the layer whose input feeds
/// it. Parameter counts include the per-channel affine and classifier bias,
/// so they equal the parameter count of the built model.
pub fn model_madds(spec: &ModelSpec, resolution: Option<(usize, usize)>) -> Result<CostReport> {
    let mut spec = spec.clone();
    if let Some((h, w)) = resolution {
        spec.input.0 = h;
        spec.input.1 = w;
    }
    let extents = resolve_extents(&spec).map_err(|v| crate::Error::Config(v.to_string()))?;
    let plan = crate::routing::bind_shared_routers(&spec, &spec.router)?;
    let mut rows = Vec::with_capacity(spec.layers.len());
    let mut total = LayerCost::default();
    for (i, l) in spec.layers.iter().enumerate() {
        let (h, w) = extents[i];
        let out_hw = match l.kind {
            LayerKind::GlobalPool | LayerKind::Fc => (1, 1),
            _ => extents.get(i + 1).copied().unwrap_or_else(|| {
                let o = |x: usize| x.div_ceil(l.stride);
                (o(h), o(w))
            }),
        };
        if l.kind.is_spatial() && (out_hw.0 == 0 || out_hw.1 == 0) {
            return config_err(format!("layer {i} ({}): empty output", l.label(i)));
        }
        let mut cost = match l.kind.conv_kind() {
            None => LayerCost::default(),
            Some(kind) => {
                let base = conv_madds(kind, l.k, l.cin, l.cout, out_hw.0, out_hw.1);
                if l.condconv {
                    let per = params_per_expert(kind, l.k, l.cin, l.cout);
                    let n = spec.num_experts as u64;
                    LayerCost::from_parts(
                        Breakdown {
                            combine: n * per,
                            ..base.breakdown
                        },
                        n * per,
                    )
                } else {
                    base
                }
            }
        };
        for slot in plan.slots.iter().filter(|s| s.anchor_layer == i) {
            cost.breakdown.routing += slot.madds();
            cost.madds += slot.madds();
            cost.params += slot.param_count() as u64;
        }
        cost.params += match l.kind {
            LayerKind::GlobalPool => 0,
            LayerKind::Fc => l.cout as u64,
            _ => 2 * l.cout as u64,
        };
        total.accumulate(&cost);
        rows.push(LayerRow {
            index: i,
            label: l.label(i),
            block: l.block,
            out_hw,
            cost,
        });
    }
    Ok(CostReport {
        model: spec.name.clone(),
        rows,
        total,
    })
}

const COLUMNS: [&str; 10] = [
    "index", "layer", "block", "out", "madds", "conv", "routing", "combine", "other", "params",
];

impl CostReport {
    fn cells(&self) -> Vec<[String; 10]> {
        let fmt = |idx: String, label: String, block: String, out: String, c: &LayerCost| {
            [
                idx,
                label,
                block,
                out,
                c.madds.to_string(),
                c.breakdown.conv.to_string(),
                c.breakdown.routing.to_string(),
                c.breakdown.combine.to_string(),
                c.breakdown.other.to_string(),
                c.params.to_string(),
            ]
        };
        let mut out: Vec<_> = self
            .rows
            .iter()
            .map(|r| {
                fmt(
                    r.index.to_string(),
                    r.label.clone(),
                    r.block.to_string(),
                    format!("{}x{}", r.out_hw.0, r.out_hw.1),
                    &r.cost,
                )
            })
            .collect();
        out.push(fmt(String::new(), "total".into(), String::new(), String::new(), &self.total));
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = COLUMNS.join(",");
        s.push('\n');
        for row in self.cells() {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Right-aligned text table with a millions summary line.
    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let mut width: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
        for row in &cells {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = String::new();
        let line = |s: &mut String, row: &[&str]| {
            let parts: Vec<String> = row
                .iter()
                .zip(&width)
                .enumerate()
                .map(|(j, (c, &w))| if j == 1 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            s.push_str(parts.join("  ").trim_end());
            s.push('\n');
        };
        line(&mut s, &COLUMNS);
        for row in &cells {
            let r: Vec<&str> = row.iter().map(String::as_str).collect();
            line(&mut s, &r);
        }
        writeln!(
            s,
            "{}: {:.2}M MADDs, {:.3}M params",
            self.model,
            self.total.madds as f64 / 1e6,
            self.total.params as f64 / 1e6
        )
        .unwrap();
        s
    }
}
