mod common;

use common::*;
use condconv::condconv::ExecutionStrategy;
use condconv::cost::model_madds;
use condconv::model::Model;
use condconv::routing::{HiddenSize, RouterConfig, RouterVariant};
use condconv::spec::{LayerKind, ModelSpec};
use condconv::zoo::{
    mobilenet_v1_spec, scale_channels, toy_cnn_spec, validate, MobileNetConfig, ToyConfig, MOBILENET_V1_BLOCKS,
};

fn toy(n: usize, begin: Option<usize>, blocks: usize, router: RouterConfig) -> ToyConfig {
    ToyConfig {
        input: (8, 8, 3),
        channels: 4,
        blocks,
        num_experts: n,
        begin_layer: begin,
        use_cc_classifier: begin.is_some(),
        router,
        num_classes: 3,
    }
}

#[test]
fn mobilenet_structure() {
    let spec = mobilenet_v1_spec(&MobileNetConfig::static_baseline(1.0)).unwrap();
    assert_eq!(spec.layers.len(), 1 + 2 * 13 + 2);
    assert_eq!(spec.layers[0].kind, LayerKind::Conv);
    assert_eq!((spec.layers[0].cout, spec.layers[0].stride), (32, 2));
    for (b, &(stride, cout)) in MOBILENET_V1_BLOCKS.iter().enumerate() {
        let dw = &spec.layers[1 + 2 * b];
        let pw = &spec.layers[2 + 2 * b];
        assert_eq!((dw.kind, dw.stride, dw.block), (LayerKind::Depthwise, stride, b + 1));
        assert_eq!((pw.kind, pw.cout, pw.block), (LayerKind::Pointwise, cout, b + 1));
    }
    assert_eq!(spec.layers.last().unwrap().cin, 1024);
    assert!(!spec.has_condconv());

    let quarter = mobilenet_v1_spec(&MobileNetConfig::condconv(0.25, 32, 7, true)).unwrap();
    assert_eq!(quarter.layers[0].cout, 8);
    assert_eq!(quarter.layers.last().unwrap().cin, 256);
    for l in &quarter.layers {
        assert_eq!(l.condconv, l.block >= 7 && l.kind != LayerKind::GlobalPool, "{l:?}");
    }
    assert_eq!(scale_channels(32, 0.25), 8);
    assert_eq!(scale_channels(64, 0.75), 48);
}

#[test]
fn manifests_round_trip() {
    let specs = [
        mobilenet_v1_spec(&MobileNetConfig::static_baseline(0.5)).unwrap(),
        mobilenet_v1_spec(&MobileNetConfig::condconv(0.25, 32, 7, true)).unwrap(),
        mobilenet_v1_spec(&MobileNetConfig {
            router: "single@9".parse().unwrap(),
            ..MobileNetConfig::condconv(0.75, 8, 9, false)
        })
        .unwrap(),
        toy_cnn_spec(&toy(4, Some(2), 3, RouterConfig::new(RouterVariant::Hidden(HiddenSize::Large)))).unwrap(),
    ];
    for s in specs {
        let text = s.to_manifest();
        let back = ModelSpec::from_manifest(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_manifest(), text);
        assert_eq!(text.lines().filter(|l| l.starts_with("layer ")).count(), s.layers.len());
    }
    assert!(ModelSpec::from_manifest("nonsense").is_err());
}

#[test]
fn violations_are_reported() {
    let good = toy_cnn_spec(&toy(4, Some(1), 2, RouterConfig::default())).unwrap();
    assert!(validate(&good).is_ok());

    let mut bad = good.clone();
    bad.layers[2].cin += 1;
    let v = validate(&bad).unwrap_err();
    assert!(v.iter().any(|e| e.layer == Some(2)), "{v:?}");

    let mut early = toy_cnn_spec(&toy(4, Some(2), 2, RouterConfig::default())).unwrap();
    early.layers[1].condconv = true;
    early.layers[2].condconv = true;
    assert!(validate(&early).unwrap_err().iter().any(|e| e.message.contains("before begin layer")));

    let mut hier = good.clone();
    hier.layers[1].router = Some(RouterVariant::Hierarchical);
    hier.layers[2].router = Some(RouterVariant::Hierarchical);
    assert!(validate(&hier).unwrap_err().iter().any(|e| e.message.contains("hierarchical")));

    let model_wide = toy_cnn_spec(&toy(4, Some(1), 2, RouterConfig::new(RouterVariant::Hierarchical))).unwrap();
    assert!(validate(&model_wide).is_ok());

    assert!(mobilenet_v1_spec(&MobileNetConfig::condconv(1.0, 8, 16, true)).is_err());
    assert!(mobilenet_v1_spec(&MobileNetConfig::condconv(1.0, 8, 0, true)).is_err());
    assert!(toy_cnn_spec(&toy(4, Some(1), 7, RouterConfig::default())).is_err());
}

#[test]
fn static_model_matches_loop_forward() {
    let mut r = rng(300);
    for blocks in 1..=3 {
        let spec = toy_cnn_spec(&toy(1, None, blocks, RouterConfig::default())).unwrap();
        let mut model: Model<f64> = Model::new(spec, &mut r).unwrap();
        randomize_params(&mut model, &mut r, 0.0);
        let x = random(&[3, 8, 8, 3], &mut r);
        let got = model.predict(&x, ExecutionStrategy::Auto).unwrap();
        let want = naive_forward(&model, &x, false);
        assert!(max_rel_err(&got, &want, 1e-9) < 1e-6);
    }
}

#[test]
fn condconv_model_matches_loop_forward() {
    let mut r = rng(301);
    let variants = [
        ("per_block", false),
        ("single", false),
        ("partially_shared", false),
        ("softmax", true),
    ];
    for (name, softmax) in variants {
        for n in [1, 3, 5] {
            let spec = toy_cnn_spec(&toy(n, Some(1), 3, name.parse().unwrap())).unwrap();
            let mut model: Model<f64> = Model::new(spec, &mut r).unwrap();
            randomize_params(&mut model, &mut r, 2.0);
            let x = random(&[2, 8, 8, 3], &mut r);
            let want = naive_forward(&model, &x, softmax);
            for s in [ExecutionStrategy::Fused, ExecutionStrategy::BranchedMoE] {
                let got = model.predict(&x, s).unwrap();
                assert!(max_rel_err(&got, &want, 1e-9) < 1e-6, "{name} n={n} {s:?}");
            }
        }
    }
}

#[test]
fn separable_blocks_share_alpha() {
    let mut r = rng(302);
    let spec = toy_cnn_spec(&toy(4, Some(1), 3, RouterConfig::default())).unwrap();
    let mut model: Model<f64> = Model::new(spec, &mut r).unwrap();
    randomize_params(&mut model, &mut r, 2.0);
    let x = random(&[4, 8, 8, 3], &mut r);
    let mut g = condconv::autodiff::Graph::new();
    let xv = g.constant(x.clone());
    let pass = model
        .forward(&mut g, xv, &mut condconv::model::ForwardConfig::eval(ExecutionStrategy::Auto))
        .unwrap();
    for (i, l) in model.spec().layers.iter().enumerate() {
        if l.kind == LayerKind::Depthwise {
            assert_eq!(pass.layer_alpha[&i], pass.layer_alpha[&(i + 1)]);
            assert_eq!(g.value(pass.layer_alpha[&i]).data(), g.value(pass.layer_alpha[&(i + 1)]).data());
        }
    }
    assert!(pass.router_evaluations.iter().all(|&c| c == 1));
}

#[test]
fn param_count_equals_cost_model_params() {
    let mut r = rng(303);
    let mut specs = vec![
        mobilenet_v1_spec(&MobileNetConfig::static_baseline(0.25)).unwrap(),
        mobilenet_v1_spec(&MobileNetConfig::condconv(0.25, 8, 13, true)).unwrap(),
        mobilenet_v1_spec(&MobileNetConfig::condconv(0.25, 4, 7, false)).unwrap(),
    ];
    for router in ["per_block", "single", "partially_shared", "hidden_small", "hidden_large", "hierarchical", "softmax"] {
        for n in [1, 2, 5] {
            specs.push(toy_cnn_spec(&toy(n, Some(1), 3, router.parse().unwrap())).unwrap());
        }
    }
    for spec in specs {
        let model: Model<f32> = Model::new(spec.clone(), &mut r).unwrap();
        let cost = model_madds(&spec, None).unwrap();
        assert_eq!(model.param_count() as u64, cost.total.params, "{}", spec.to_manifest());
    }
}

#[test]
fn madds_grow_with_width_and_experts() {
    let madds = |cfg: &MobileNetConfig| model_madds(&mobilenet_v1_spec(cfg).unwrap(), None).unwrap().total.madds;
    let mut last = 0;
    for w in [0.25, 0.5, 0.75, 1.0] {
        let m = madds(&MobileNetConfig::static_baseline(w));
        assert!(m > last);
        last = m;
    }
    let mut last = 0;
    for n in [1, 2, 4, 8, 16, 32] {
        let m = madds(&MobileNetConfig::condconv(0.25, n, 7, true));
        assert!(m > last);
        last = m;
    }
}
