//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any fails.

mod common;

use std::time::Instant;

use common::*;
use condconv::analysis::{
    class_specificity_by_depth, global_mean, per_class_mean, routing_histogram, top_classes_per_expert, LayerTrace,
    RoutingTrace,
};
use condconv::condconv::{condconv_forward, select_strategy, ConvKind, ExecutionStrategy, ExpertBank, RoutingActivation};
use condconv::cost::{condconv_madds, model_madds, params_per_expert};
use condconv::model::{Model, ParamRole};
use condconv::ops::Padding;
use condconv::train::{stream, train, Checkpoint, SyntheticSpec, TrainConfig, STREAM_INIT};
use condconv::experiment::{prepare, sweep, sweep_csv};
use condconv::zoo::{mobilenet_v1_spec, toy_cnn_spec, MobileNetConfig, ToyConfig};
use condconv::Tensor;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn small_toy(n: usize, begin: Option<usize>) -> ToyConfig {
    ToyConfig {
        input: (6, 6, 3),
        channels: 3,
        blocks: 2,
        num_experts: n,
        begin_layer: begin,
        use_cc_classifier: begin.is_some(),
        router: Default::default(),
        num_classes: 3,
    }
}

fn equivalence() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut configs = 0;
    for trial in 0..240 {
        let kind = [ConvKind::Standard, ConvKind::Depthwise, ConvKind::Fc][trial % 3];
        let n = [1, 2, 4, 8, 16][(trial / 3) % 5];
        let k = [1, 3][r.random_range(0..2)];
        let b = [1, 4][r.random_range(0..2)];
        let (cin, cout) = (r.random_range(1..=4), r.random_range(1..=4));
        let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
        let (x, shape) = match kind {
            ConvKind::Standard => (random(&[b, h, w, cin], &mut r), vec![k, k, cin, cout]),
            ConvKind::Depthwise => (random(&[b, h, w, cin], &mut r), vec![k, k, cin, 1]),
            ConvKind::Fc => (random(&[b, cin], &mut r), vec![cin, cout]),
        };
        let experts: Vec<Tensor<f64>> = (0..n).map(|_| random(&shape, &mut r)).collect();
        let bank = ExpertBank::new(&experts, random(&[cin, n], &mut r)).map_err(|e| e.to_string())?;
        let (stride, padding) = match kind {
            ConvKind::Fc => (1, Padding::Valid),
            _ => (r.random_range(1..=2), Padding::Same),
        };
        let run = |s| condconv_forward(&x, &bank, RoutingActivation::Sigmoid, s, kind, stride, padding).map_err(|e| e.to_string());
        worst = worst.max(max_rel_err(&run(ExecutionStrategy::Fused)?, &run(ExecutionStrategy::BranchedMoE)?, 1e-12));
        configs += 1;
    }
    check(worst < 1e-5, format!("{configs} configurations, max rel err {worst:.2e}"))
}

fn gradients() -> Outcome {
    let mut r = rng(2);
    let spec = toy_cnn_spec(&small_toy(3, Some(1))).map_err(|e| e.to_string())?;
    let mut model: Model<f64> = Model::new(spec, &mut r).map_err(|e| e.to_string())?;
    randomize_params(&mut model, &mut r, 0.5);
    let x = random(&[2, 6, 6, 3], &mut r);
    let labels = [0, 2];
    let fused = model_grads(&model, &x, &labels, ExecutionStrategy::Fused);
    let branched = model_grads(&model, &x, &labels, ExecutionStrategy::BranchedMoE);
    let (mut worst_fd, mut worst_pair, mut checked) = (0.0f64, 0.0f64, 0);
    for (i, p) in model.params().iter().enumerate() {
        let fd = fd_grad(&p.value, 1e-5, |probe| {
            let mut m = model.clone();
            m.set_param(i, probe.clone()).unwrap();
            model_loss(&m, &x, &labels, ExecutionStrategy::Fused)
        });
        worst_fd = worst_fd.max(max_rel_err(&fused[i], &fd, 1e-6)).max(max_rel_err(&branched[i], &fd, 1e-6));
        worst_pair = worst_pair.max(max_rel_err(&fused[i], &branched[i], 1e-9));
        checked += usize::from(matches!(p.role, ParamRole::Experts | ParamRole::Routing));
    }
    check(
        worst_fd < 1e-4 && worst_pair < 1e-4 && checked > 0,
        format!(
            "{} tensors ({checked} expert/router), fd rel err {worst_fd:.2e}, fused vs branched {worst_pair:.2e}",
            model.params().len()
        ),
    )
}

fn constant_routing() -> Outcome {
    let mut r = rng(3);
    let cc: Model<f64> = Model::new(toy_cnn_spec(&small_toy(4, Some(1))).unwrap(), &mut r).map_err(|e| e.to_string())?;
    let routing_is_zero = cc
        .params()
        .iter()
        .filter(|p| p.role == ParamRole::Routing)
        .all(|p| p.value.data().iter().all(|&v| v == 0.0));
    // static twin built by hand: kernel = 0.5 * sum of experts
    let static_spec = toy_cnn_spec(&small_toy(1, None)).unwrap();
    let params: Vec<(String, Tensor<f64>)> = cc
        .params()
        .iter()
        .filter(|p| p.role != ParamRole::Routing)
        .map(|p| match p.role {
            ParamRole::Experts => {
                let n = p.value.shape()[0];
                let mut k = p.value.index_first(0).unwrap().zeros_like();
                for i in 0..n {
                    k.axpy(0.5, &p.value.index_first(i).unwrap()).unwrap();
                }
                (p.name.replace(".experts", ".kernel"), k)
            }
            _ => (p.name.clone(), p.value.clone()),
        })
        .collect();
    let plain = Model::from_params(static_spec, params).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = uniform(&[1, 6, 6, 3], -2.0, 2.0, &mut r);
        let a = cc.predict(&x, ExecutionStrategy::Auto).map_err(|e| e.to_string())?;
        let b = plain.predict(&x, ExecutionStrategy::Auto).map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_err(&a, &b, 1e-9));
    }
    check(routing_is_zero && worst < 1e-6, format!("100 inputs, max rel err {worst:.2e}"))
}

fn published_costs() -> Outcome {
    let madds = |cfg: MobileNetConfig| model_madds(&mobilenet_v1_spec(&cfg).unwrap(), None).unwrap().total.madds as f64 / 1e6;
    let rows = [
        ("1.0x static", madds(MobileNetConfig::static_baseline(1.0)), 567.0, 0.02),
        ("1.0x cc8", madds(MobileNetConfig::condconv(1.0, 8, 6, true)), 600.0, 0.02),
        ("0.25x static", madds(MobileNetConfig::static_baseline(0.25)), 41.2, 0.03),
        ("0.25x cc32 b7", madds(MobileNetConfig::condconv(0.25, 32, 7, true)), 55.7, 0.03),
        ("0.25x cc32 b1", madds(MobileNetConfig::condconv(0.25, 32, 1, true)), 56.3, 0.03),
        ("0.25x cc32 b5", madds(MobileNetConfig::condconv(0.25, 32, 5, true)), 56.0, 0.03),
        ("0.25x cc32 b13", madds(MobileNetConfig::condconv(0.25, 32, 13, true)), 52.5, 0.03),
        ("0.25x cc32 b15", madds(MobileNetConfig::condconv(0.25, 32, 15, true)), 49.3, 0.03),
        ("0.25x cc32 b7 no-fc", madds(MobileNetConfig::condconv(0.25, 32, 7, false)), 47.6, 0.03),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, got, want, tol) in rows {
        let rel = (got - want) / want;
        ok &= rel.abs() <= tol;
        parts.push(format!("{name} {got:.1}M ({:+.1}%)", 100.0 * rel));
    }
    check(ok, parts.join(", "))
}

fn madd_identity() -> Outcome {
    let mut cases = 0u64;
    for kind in [ConvKind::Standard, ConvKind::Depthwise, ConvKind::Fc] {
        for k in [1, 3, 5] {
            for (cin, cout) in [(1, 1), (8, 16), (32, 64), (256, 256), (1024, 1000)] {
                for out in [1, 7, 14, 56] {
                    for routed in [cin, 1, 3 * cin] {
                        for n in 2..=32 {
                            let d = condconv_madds(kind, k, cin, cout, out, out, n, routed).madds
                                - condconv_madds(kind, k, cin, cout, out, out, n - 1, routed).madds;
                            if d != params_per_expert(kind, k, cin, cout) + routed as u64 {
                                return Err(format!("{kind:?} k={k} {cin}->{cout} out={out} n={n}: {d}"));
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{cases} configurations, exact"))
}

fn capacity() -> Outcome {
    let data = SyntheticSpec::default().generate::<f32>().map_err(|e| e.to_string())?;
    let toy = ToyConfig {
        num_experts: 1,
        ..ToyConfig::default()
    };
    let seeds: Vec<u64> = (0..5).collect();
    let rows = sweep(&toy, &data, 0.2, &[1, 2, 4, 8], &seeds, &TrainConfig::new(0)).map_err(|e| e.to_string())?;
    println!("  sweep over {} examples, {} seeds", data.len(), seeds.len());
    for line in sweep_csv(&rows).lines() {
        println!("  {line}");
    }
    let means: Vec<f64> = rows.iter().map(|r| r.mean_accuracy()).collect();
    let trend = if means.windows(2).all(|w| w[1] >= w[0]) {
        "non-decreasing"
    } else {
        "not monotone"
    };
    let (one, four) = (means[0], means[2]);
    check(
        four >= one,
        format!("mean val top1 n=1 {one:.4}, n=4 {four:.4}; trend over n=1,2,4,8 is {trend}"),
    )
}

/// Layer `l` routes class `c` to expert `c` with strength `signal[l]`.
fn planted_trace(r: &mut impl Rng, n_examples: usize, n: usize, signal: &[f64]) -> RoutingTrace {
    let labels: Vec<usize> = (0..n_examples).map(|_| r.random_range(0..n)).collect();
    let layers = signal
        .iter()
        .enumerate()
        .map(|(l, &s)| LayerTrace {
            layer: l,
            depth: l + 1,
            num_experts: n,
            alpha: labels
                .iter()
                .flat_map(|&c| (0..n).map(move |i| (c, i)))
                .map(|(c, i)| 0.3 + r.random_range(0.0..0.2) + if i == c { s } else { 0.0 })
                .collect(),
        })
        .collect();
    RoutingTrace::new(labels, n, layers).unwrap()
}

fn analysis() -> Outcome {
    let mut r = rng(7);
    let n = 4;
    let signal = [0.0, 0.1, 0.2, 0.35, 0.5];
    let trace = planted_trace(&mut r, 1000, n, &signal);
    let mut worst_mean: f64 = 0.0;
    for (li, lt) in trace.layers.iter().enumerate() {
        let stats = per_class_mean(&trace, li).map_err(|e| e.to_string())?;
        for c in 0..n {
            let members: Vec<usize> = (0..trace.len()).filter(|&e| trace.labels[e] == c).collect();
            if stats.counts[c] != members.len() {
                return Err(format!("layer {li} class {c}: count mismatch"));
            }
            for i in 0..n {
                let m = members.iter().map(|&e| lt.row(e)[i]).sum::<f64>() / members.len() as f64;
                worst_mean = worst_mean.max((m - stats.mean[c][i]).abs());
            }
        }
        let global = global_mean(&trace, li).map_err(|e| e.to_string())?;
        for i in 0..n {
            let weighted = (0..n).map(|c| stats.counts[c] as f64 * stats.mean[c][i]).sum::<f64>() / trace.len() as f64;
            worst_mean = worst_mean.max((weighted - global[i]).abs());
        }
        let hist = routing_histogram(&trace, li, 20).map_err(|e| e.to_string())?;
        for (b, &count) in hist.iter().enumerate() {
            let (lo, hi) = (b as f64 / 20.0, (b + 1) as f64 / 20.0);
            let want = lt.alpha.iter().filter(|&&a| a >= lo && (a < hi || (b == 19 && a <= hi))).count() as u64;
            if count != want {
                return Err(format!("layer {li} bin {b}: {count} vs {want}"));
            }
        }
        if hist.iter().sum::<u64>() != (trace.len() * n) as u64 {
            return Err(format!("layer {li}: histogram total"));
        }
        if li > 0 {
            for i in 0..n {
                if top_classes_per_expert(&stats, i, 1).map_err(|e| e.to_string())? != vec![i] {
                    return Err(format!("layer {li} expert {i}: planted maximum not recovered"));
                }
            }
        }
    }
    let depth = class_specificity_by_depth(&trace).map_err(|e| e.to_string())?;
    let monotone = depth.windows(2).all(|w| w[0].specificity < w[1].specificity);
    check(
        worst_mean < 1e-6 && monotone,
        format!("{} layers, mean err {worst_mean:.1e}, planted specificity order recovered: {monotone}", depth.len()),
    )
}

fn strategy_rule() -> Outcome {
    let bad: Vec<usize> = (1..=64)
        .filter(|&n| {
            let want = if n <= 4 { ExecutionStrategy::BranchedMoE } else { ExecutionStrategy::Fused };
            select_strategy(n, ExecutionStrategy::Auto) != want
        })
        .collect();
    check(bad.is_empty(), format!("n=1..64 checked, mismatches {bad:?}"))
}

fn determinism() -> Outcome {
    let data = SyntheticSpec::parse("classes=3,per_class=40,size=10").unwrap().generate::<f32>().map_err(|e| e.to_string())?;
    let run = || -> condconv::Result<(Vec<u8>, String)> {
        let (tr, va, _) = prepare(&data, 0.25, 11)?;
        let cfg = TrainConfig {
            epochs: 2,
            keep_prob: 0.8,
            mixup_alpha: 0.2,
            expert_dropout: 0.1,
            ..TrainConfig::new(11)
        };
        let spec = toy_cnn_spec(&ToyConfig {
            input: (10, 10, 3),
            channels: 6,
            num_classes: 3,
            ..ToyConfig::default()
        })?;
        let model = Model::new(spec, &mut stream(cfg.seed, STREAM_INIT))?;
        let (model, history) = train(model, &tr, Some(&va), &cfg)?;
        Ok((Checkpoint::new(model).encode()?, history.to_csv()))
    };
    let a = run().map_err(|e| e.to_string())?;
    let b = run().map_err(|e| e.to_string())?;
    check(
        a == b,
        format!("checkpoint {} bytes and metrics {} bytes identical: {}", a.0.len(), a.1.len(), a == b),
    )
}

fn main() {
    // name, check, time budget in seconds
    let criteria: [(&str, fn() -> Outcome, f64); 9] = [
        ("strategy equivalence", equivalence, 60.0),
        ("gradient checks", gradients, 300.0),
        ("constant-routing degeneracy", constant_routing, 60.0),
        ("cost-model reproduction", published_costs, 60.0),
        ("one madd per parameter", madd_identity, 60.0),
        ("desk-scale capacity", capacity, 1800.0),
        ("analysis oracles", analysis, 60.0),
        ("strategy selection", strategy_rule, 60.0),
        ("determinism", determinism, 300.0),
    ];
    let mut failed = 0;
    for (i, &(name, f, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if secs > budget => Err(format!("{detail}; over the {budget:.0}s budget")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.1}s) {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
