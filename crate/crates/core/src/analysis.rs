//! Routing-weight traces and the statistics computed from them.

use std::fmt::Write as _;

use crate::condconv::ExecutionStrategy;
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::train::Dataset;

pub const DEFAULT_BINS: usize = 20;
const TRACE_MAGIC: &[u8; 8] = b"CCTRACE1";

/// Routing weights of one CondConv layer over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Layer index in the model.
    pub layer: usize,
    /// Block the layer belongs to.
    pub depth: usize,
    pub num_experts: usize,
    /// Row-major `[N, num_experts]`.
    pub alpha: Vec<f64>,
}

impl LayerTrace {
    pub fn row(&self, example: usize) -> &[f64] {
        &self.alpha[example * self.num_experts..(example + 1) * self.num_experts]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerTrace>,
}

impl RoutingTrace {
    pub fn new(labels: Vec<usize>, num_classes: usize, layers: Vec<LayerTrace>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return config_err(format!("label {bad} out of range for {num_classes} classes"));
        }
        for l in &layers {
            if l.num_experts == 0 || l.alpha.len() != labels.len() * l.num_experts {
                return shape_err(format!(
                    "layer {}: {} weights for {} examples x {} experts",
                    l.layer,
                    l.alpha.len(),
                    labels.len(),
                    l.num_experts
                ));
            }
        }
        Ok(Self {
            labels,
            num_classes,
            layers,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Trace layer at position `li`.
    pub fn layer(&self, li: usize) -> Result<&LayerTrace> {
        self.layers
            .get(li)
            .ok_or_else(|| Error::Config(format!("trace has {} layers, asked for {li}", self.layers.len())))
    }

    /// Rows `layer,example_index,label,expert_index,alpha`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,example_index,label,expert_index,alpha\n");
        for l in &self.layers {
            for (e, &label) in self.labels.iter().enumerate() {
                for (i, a) in l.row(e).iter().enumerate() {
                    writeln!(s, "{},{e},{label},{i},{a:e}", l.layer).unwrap();
                }
            }
        }
        s
    }

    /// Little-endian binary form; `from_bytes` restores it exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = TRACE_MAGIC.to_vec();
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u64).to_le_bytes());
        put(&mut out, self.labels.len());
        put(&mut out, self.num_classes);
        put(&mut out, self.layers.len());
        for &l in &self.labels {
            put(&mut out, l);
        }
        for l in &self.layers {
            put(&mut out, l.layer);
            put(&mut out, l.depth);
            put(&mut out, l.num_experts);
            for a in &l.alpha {
                out.extend_from_slice(&a.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Format("truncated or malformed routing trace".into());
        if bytes.get(..8) != Some(TRACE_MAGIC.as_slice()) {
            return Err(Error::Format("not a routing trace".into()));
        }
        let mut pos = 8;
        let mut word = || -> Result<u64> {
            let b = bytes.get(pos..pos + 8).ok_or_else(bad)?;
            pos += 8;
            Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
        };
        let n = word()? as usize;
        let classes = word()? as usize;
        let count = word()? as usize;
        let labels = (0..n).map(|_| word().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let layer = word()? as usize;
            let depth = word()? as usize;
            let num_experts = word()? as usize;
            let alpha = (0..n * num_experts)
                .map(|_| word().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerTrace {
                layer,
                depth,
                num_experts,
                alpha,
            });
        }
        if pos != bytes.len() {
            return Err(bad());
        }
        Self::new(labels, classes, layers)
    }
}

/// Inference-mode routing weights of every CondConv layer over `data`.
pub fn collect_trace<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    strategy: ExecutionStrategy,
    batch_size: usize,
) -> Result<RoutingTrace> {
    let cc = model.condconv_layers();
    let mut layers: Vec<LayerTrace> = cc
        .iter()
        .map(|&l| LayerTrace {
            layer: l,
            depth: model.spec().layers[l].block,
            num_experts: model.spec().num_experts,
            alpha: Vec::with_capacity(data.len() * model.spec().num_experts),
        })
        .collect();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.gather(chunk)?;
        let (_, alphas) = model.predict_with_routing(&x, strategy)?;
        for lt in &mut layers {
            lt.alpha.extend(alphas[&lt.layer].data().iter().map(|v| v.as_f64()));
        }
    }
    RoutingTrace::new(data.labels.clone(), data.num_classes, layers)
}

/// Order-independent sum: values are added in ascending order.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Per-class mean and standard deviation of routing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    /// `[num_classes][n]`; zero for classes without examples.
    pub mean: Vec<Vec<f64>>,
    /// Population standard deviation.
    pub std: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl ClassStats {
    pub fn num_experts(&self) -> usize {
        self.mean.first().map_or(0, Vec::len)
    }
}

pub fn per_class_mean(trace: &RoutingTrace, li: usize) -> Result<ClassStats> {
    let lt = trace.layer(li)?;
    let (k, n) = (trace.num_classes, lt.num_experts);
    let mut buckets: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n]; k];
    for (e, &label) in trace.labels.iter().enumerate() {
        for (i, &a) in lt.row(e).iter().enumerate() {
            buckets[label][i].push(a);
        }
    }
    let mut mean = vec![vec![0.0; n]; k];
    let mut std = vec![vec![0.0; n]; k];
    let mut counts = vec![0; k];
    for c in 0..k {
        for i in 0..n {
            let vals = &mut buckets[c][i];
            counts[c] = vals.len();
            if vals.is_empty() {
                continue;
            }
            let m = sorted_sum(vals) / vals.len() as f64;
            let mut sq: Vec<f64> = vals.iter().map(|v| (v - m) * (v - m)).collect();
            mean[c][i] = m;
            std[c][i] = (sorted_sum(&mut sq) / vals.len() as f64).sqrt();
        }
    }
    Ok(ClassStats { mean, std, counts })
}

/// Mean routing weight over all examples, per expert.
pub fn global_mean(trace: &RoutingTrace, li: usize) -> Result<Vec<f64>> {
    let lt = trace.layer(li)?;
    Ok((0..lt.num_experts)
        .map(|i| {
            let mut v: Vec<f64> = (0..trace.len()).map(|e| lt.row(e)[i]).collect();
            sorted_sum(&mut v) / trace.len().max(1) as f64
        })
        .collect())
}

/// Counts over `bins` equal-width bins on [0, 1]; 1.0 lands in the last bin.
pub fn routing_histogram(trace: &RoutingTrace, li: usize, bins: usize) -> Result<Vec<u64>> {
    if bins == 0 {
        return config_err("histogram needs at least one bin");
    }
    let lt = trace.layer(li)?;
    let mut counts = vec![0u64; bins];
    for &a in &lt.alpha {
        let b = (a * bins as f64).floor();
        let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
        counts[b] += 1;
    }
    Ok(counts)
}

/// Mean over experts of the variance, across classes present, of the per-class mean.
pub fn class_specificity(stats: &ClassStats) -> f64 {
    let present: Vec<usize> = (0..stats.counts.len()).filter(|&c| stats.counts[c] > 0).collect();
    let n = stats.num_experts();
    if present.is_empty() || n == 0 {
        return 0.0;
    }
    let mut per_expert: Vec<f64> = (0..n)
        .map(|i| {
            let mut m: Vec<f64> = present.iter().map(|&c| stats.mean[c][i]).collect();
            let mu = sorted_sum(&mut m) / present.len() as f64;
            let mut sq: Vec<f64> = m.iter().map(|v| (v - mu) * (v - mu)).collect();
            sorted_sum(&mut sq) / present.len() as f64
        })
        .collect();
    sorted_sum(&mut per_expert) / n as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthPoint {
    pub layer: usize,
    pub depth: usize,
    pub specificity: f64,
}

/// [`class_specificity`] of every trace layer, in trace order.
pub fn class_specificity_by_depth(trace: &RoutingTrace) -> Result<Vec<DepthPoint>> {
    (0..trace.layers.len())
        .map(|li| {
            let lt = &trace.layers[li];
            Ok(DepthPoint {
                layer: lt.layer,
                depth: lt.depth,
                specificity: class_specificity(&per_class_mean(trace, li)?),
            })
        })
        .collect()
}

/// The `k` classes with the highest mean weight on `expert`; ties go to the
/// lower class index. Classes without examples are skipped.
pub fn top_classes_per_expert(stats: &ClassStats, expert: usize, k: usize) -> Result<Vec<usize>> {
    if expert >= stats.num_experts() {
        return config_err(format!("expert {expert} out of range for {} experts", stats.num_experts()));
    }
    let mut classes: Vec<usize> = (0..stats.counts.len()).filter(|&c| stats.counts[c] > 0).collect();
    classes.sort_by(|&a, &b| stats.mean[b][expert].total_cmp(&stats.mean[a][expert]).then(a.cmp(&b)));
    classes.truncate(k);
    Ok(classes)
}

/// Per class, the example with the highest weight on `expert` (first on ties).
pub fn exemplars(trace: &RoutingTrace, li: usize, expert: usize) -> Result<Vec<Option<usize>>> {
    let lt = trace.layer(li)?;
    if expert >= lt.num_experts {
        return config_err(format!("expert {expert} out of range for {} experts", lt.num_experts));
    }
    let mut best: Vec<Option<usize>> = vec![None; trace.num_classes];
    for (e, &label) in trace.labels.iter().enumerate() {
        let a = lt.row(e)[expert];
        match best[label] {
            Some(b) if lt.row(b)[expert] >= a => {}
            _ => best[label] = Some(e),
        }
    }
    Ok(best)
}
