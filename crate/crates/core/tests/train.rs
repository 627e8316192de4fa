mod common;

use common::*;
use condconv::condconv::{ExecutionStrategy, RoutingWeights};
use condconv::config::ConfigMap;
use condconv::model::{Model, ParamRole};
use condconv::train::data::{encode_idx_labels, encode_idx_tensor, load_idx_pair, parse_idx};
use condconv::train::regularize::{dropout_mask, expert_dropout_mask};
use condconv::train::{
    evaluate, expert_dropout, mixup, one_hot, stream, train, Checkpoint, Dataset, Schedule, Sgd, SyntheticSpec,
    TrainConfig, STREAM_INIT,
};
use condconv::zoo::{toy_cnn_spec, ToyConfig};
use condconv::{Error, Tensor};

fn toy(n: usize, input: (usize, usize, usize), classes: usize) -> ToyConfig {
    ToyConfig {
        input,
        channels: 4,
        blocks: 2,
        num_experts: n,
        begin_layer: Some(1),
        use_cc_classifier: true,
        router: Default::default(),
        num_classes: classes,
    }
}

fn blobs<T: condconv::Scalar>(classes: usize, per_class: usize, size: usize, noise: f64) -> Dataset<T> {
    SyntheticSpec {
        classes,
        per_class,
        height: size,
        width: size,
        noise,
        ..SyntheticSpec::default()
    }
    .generate()
    .unwrap()
}

#[test]
fn seed_is_required_and_ranges_are_checked() {
    let mut c = ConfigMap::parse("[train]\nepochs = 3\nlearning_rate = 0.1\n").unwrap();
    assert!(matches!(TrainConfig::from_config(&c), Err(Error::Config(_))));
    c.set("seed", "11");
    let tc = TrainConfig::from_config(&c).unwrap();
    assert_eq!((tc.seed, tc.epochs, tc.learning_rate), (11, 3, 0.1));

    for (key, bad, good) in [
        ("keep_prob", "0.59", "0.6"),
        ("keep_prob", "1.01", "1.0"),
        ("expert_dropout", "1.0", "0.99"),
        ("expert_dropout", "-0.1", "0"),
        ("mixup_alpha", "-1", "0.2"),
        ("clip_norm", "-1", "none"),
    ] {
        let mut c = c.clone();
        c.set(key, bad);
        assert!(TrainConfig::from_config(&c).is_err(), "{key}={bad}");
        c.set(key, good);
        assert!(TrainConfig::from_config(&c).is_ok(), "{key}={good}");
    }
    c.set("autoaugment", "true");
    assert!(matches!(TrainConfig::from_config(&c), Err(Error::Unimplemented(_))));
}

#[test]
fn sgd_matches_hand_update() {
    let mut r = rng(600);
    let spec = toy_cnn_spec(&toy(3, (6, 6, 3), 2)).unwrap();
    let mut model: Model<f64> = Model::new(spec, &mut r).unwrap();
    randomize_params(&mut model, &mut r, 0.5);
    let grads: Vec<Tensor<f64>> = model.params().iter().map(|p| random(p.value.shape(), &mut r)).collect();
    let (mu, wd, lr) = (0.9, 0.01, 0.1);
    let mut sgd = Sgd::new(model.params(), mu, wd);
    let before: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    sgd.step(model.params_mut(), &grads, lr).unwrap();
    sgd.step(model.params_mut(), &grads, lr).unwrap();
    for ((p, w0), g) in model.params().iter().zip(&before).zip(&grads) {
        let decay = matches!(p.role, ParamRole::Kernel | ParamRole::Experts | ParamRole::Routing);
        let d = if decay { wd } else { 0.0 };
        for ((&got, &w), &g) in p.value.data().iter().zip(w0.data()).zip(g.data()) {
            let v1 = g + d * w;
            let w1 = w - lr * v1;
            let v2 = mu * v1 + g + d * w1;
            let w2 = w1 - lr * v2;
            assert!((got - w2).abs() < 1e-12, "{}", p.name);
        }
    }
}

#[test]
fn one_small_step_lowers_the_loss() {
    let mut r = rng(601);
    let data: Dataset<f64> = blobs(3, 6, 6, 0.3);
    for n in [1, 4] {
        let spec = toy_cnn_spec(&toy(n, (6, 6, 3), 3)).unwrap();
        let mut model: Model<f64> = Model::new(spec, &mut r).unwrap();
        randomize_params(&mut model, &mut r, 0.5);
        let before = model_loss(&model, &data.images, &data.labels, ExecutionStrategy::Auto);
        let grads = model_grads(&model, &data.images, &data.labels, ExecutionStrategy::Auto);
        let norm2: f64 = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum();
        let lr = 1e-3;
        let mut sgd = Sgd::new(model.params(), 0.0, 0.0);
        sgd.step(model.params_mut(), &grads, lr).unwrap();
        let after = model_loss(&model, &data.images, &data.labels, ExecutionStrategy::Auto);
        assert!(after < before, "n={n}: {before} -> {after}");
        // first-order prediction of the decrease
        let predicted = lr * norm2;
        assert!(((before - after) - predicted).abs() < 0.1 * predicted, "n={n}");
    }
}

#[test]
fn schedule_shapes() {
    let s = Schedule::WarmupCosine { warmup_epochs: 2 };
    let (per, total) = (5, 30);
    let rates: Vec<f64> = (0..total).map(|t| s.rate(0.4, t, total, per)).collect();
    for t in 0..10 {
        assert!((rates[t] - 0.4 * (t + 1) as f64 / 10.0).abs() < 1e-12);
    }
    assert!(rates[10..].windows(2).all(|w| w[1] <= w[0]));
    let mid: f64 = 0.5 * 0.4 * (1.0 + (std::f64::consts::PI * 10.0 / 20.0).cos());
    assert!((rates[20] - mid).abs() < 1e-12);
    assert!(rates.iter().all(|&v| v > 0.0 && v <= 0.4));
    assert_eq!(Schedule::Constant.rate(0.3, 17, 30, 5), 0.3);
}

#[test]
fn learns_a_separable_problem() {
    let data: Dataset<f32> = SyntheticSpec {
        jitter: 0.5,
        ..SyntheticSpec::parse("classes=2,per_class=150,size=12,noise=0.2").unwrap()
    }
    .generate()
    .unwrap();
    let (tr, va) = data.split(0.2, 1).unwrap();
    let stats = tr.stats.clone();
    let (tr, va) = (tr.normalized(&stats).unwrap(), va.normalized(&stats).unwrap());
    let spec = toy_cnn_spec(&toy(2, (12, 12, 3), 2)).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::new(3)
    };
    let model = Model::new(spec, &mut stream(cfg.seed, STREAM_INIT)).unwrap();
    let (model, history) = train(model, &tr, Some(&va), &cfg).unwrap();
    let (_, top1) = evaluate(&model, &va, ExecutionStrategy::Auto, 64).unwrap();
    assert!(top1 >= 0.99, "val top1 {top1}");
    assert_eq!(history.rows.len(), 2 * cfg.epochs);
    let first = history.rows.iter().find(|r| r.split == "train").unwrap().loss;
    assert!(history.last("train").unwrap().loss < first);
}

#[test]
fn training_is_deterministic() {
    let data: Dataset<f32> = blobs(3, 20, 8, 0.6);
    let (tr, va) = data.split(0.25, 5).unwrap();
    let run = || {
        let spec = toy_cnn_spec(&toy(3, (8, 8, 3), 3)).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            keep_prob: 0.8,
            mixup_alpha: 0.2,
            expert_dropout: 0.1,
            ..TrainConfig::new(9)
        };
        let model = Model::new(spec, &mut stream(cfg.seed, STREAM_INIT)).unwrap();
        let (model, history) = train(model, &tr, Some(&va), &cfg).unwrap();
        (Checkpoint::new(model).encode().unwrap(), history.to_csv())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn frozen_routing_trains_like_the_static_equivalent() {
    let data: Dataset<f64> = blobs(2, 12, 6, 0.5);
    let spec = toy_cnn_spec(&toy(4, (6, 6, 3), 2)).unwrap();
    let cc: Model<f64> = Model::new(spec, &mut rng(602)).unwrap();
    let plain = cc.static_equivalent().unwrap();
    assert!(!plain.spec().has_condconv());
    let x = &data.images;
    assert!(max_rel_err(&cc.predict(x, ExecutionStrategy::Auto).unwrap(), &plain.predict(x, ExecutionStrategy::Auto).unwrap(), 1e-9) < 1e-9);

    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 6,
        freeze_routing: true,
        ..TrainConfig::new(4)
    };
    let (cc, h_cc) = train(cc, &data, None, &cfg).unwrap();
    let (plain, h_plain) = train(plain, &data, None, &TrainConfig { freeze_routing: false, ..cfg.clone() }).unwrap();
    let (a, b) = (h_cc.last("train").unwrap().loss, h_plain.last("train").unwrap().loss);
    assert!((a - b).abs() / a.abs().max(1e-12) < 1e-4, "{a} vs {b}");
    for p in cc.params().iter().filter(|p| p.role == ParamRole::Routing) {
        assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
    }
    let got = cc.predict(x, ExecutionStrategy::Auto).unwrap();
    let want = plain.predict(x, ExecutionStrategy::Auto).unwrap();
    assert!(max_rel_err(&got, &want, 1e-6) < 1e-4);
}

#[test]
fn non_finite_parameters_are_reported() {
    let data: Dataset<f32> = blobs(2, 4, 6, 0.5);
    let spec = toy_cnn_spec(&toy(2, (6, 6, 3), 2)).unwrap();
    let mut model: Model<f32> = Model::new(spec, &mut rng(603)).unwrap();
    let i = model.find_param("l01.dw.experts").unwrap();
    let mut v = model.params()[i].value.clone();
    v.data_mut()[0] = f32::NAN;
    model.set_param(i, v).unwrap();
    match train(model, &data, None, &TrainConfig::new(0)) {
        Err(Error::NonFinite { epoch, step, .. }) => assert_eq!((epoch, step), (1, 0)),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn class_count_mismatch_is_rejected() {
    let data: Dataset<f32> = blobs(3, 4, 6, 0.5);
    let model: Model<f32> = Model::new(toy_cnn_spec(&toy(2, (6, 6, 3), 2)).unwrap(), &mut rng(604)).unwrap();
    assert!(evaluate(&model, &data, ExecutionStrategy::Auto, 8).is_err());
    assert!(train(model, &data, None, &TrainConfig::new(0)).is_err());
}

#[test]
fn mixup_preserves_label_mass() {
    let mut r = rng(605);
    for b in [1, 2, 7, 32] {
        let labels: Vec<usize> = (0..b).map(|i| (i * 5) % 4).collect();
        let y = one_hot::<f64>(&labels, 4).unwrap();
        let x = random(&[b, 3, 3, 2], &mut r);
        let (mx, my) = mixup(&x, &y, 0.4, &mut r).unwrap();
        assert_eq!(mx.shape(), x.shape());
        let total: f64 = my.data().iter().sum();
        assert!((total - b as f64).abs() < 1e-9);
        for row in my.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn expert_dropout_survivor_rate() {
    let mut r = rng(606);
    let n = 8;
    for rate in [0.1, 0.25, 0.5] {
        let samples = 100_000 / n;
        let alpha = RoutingWeights::new(Tensor::<f64>::full(vec![samples, n], 0.3).unwrap()).unwrap();
        let out = expert_dropout(&alpha, rate, &mut r, true).unwrap();
        let survivors = out.alpha.data().iter().filter(|&&v| v != 0.0).count() as f64 / samples as f64;
        let want = n as f64 * (1.0 - rate);
        assert!((survivors - want).abs() / want < 0.02, "rate {rate}: {survivors} vs {want}");
        assert!(out.alpha.data().iter().all(|&v| v == 0.0 || v == 0.3));
        let m: Tensor<f64> = expert_dropout_mask(&[samples, n], rate, &mut r).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn dropout_mask_keeps_the_mean() {
    let mut r = rng(607);
    for keep in [0.6, 0.8, 0.95] {
        let m: Tensor<f64> = dropout_mask(&[100_000], keep, &mut r).unwrap();
        let mean = m.data().iter().sum::<f64>() / m.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "keep {keep}: {mean}");
    }
}

#[test]
fn checkpoints_round_trip_and_detect_damage() {
    let mut r = rng(608);
    let spec = toy_cnn_spec(&toy(3, (8, 8, 3), 3)).unwrap();
    let mut model: Model<f32> = Model::new(spec, &mut r).unwrap();
    let i = model.find_param("router0.w0").unwrap();
    let v = Tensor::from_fn(model.params()[i].value.shape().to_vec(), |k| (k as f32 * 0.37).sin()).unwrap();
    model.set_param(i, v).unwrap();
    let mut ck = Checkpoint::new(model);
    ck.meta.insert("seed".into(), "17".into());
    ck.meta.insert("normalization".into(), "1e0,2e0;3e0,4e0".into());
    let bytes = ck.encode().unwrap();
    let back = Checkpoint::<f32>::decode(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.encode().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), ck);

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    assert!(matches!(Checkpoint::<f32>::decode(&flipped), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 4]).is_err());
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0, 0, 0, 0]);
    assert!(Checkpoint::<f32>::decode(&longer).is_err());
    assert!(Checkpoint::<f64>::decode(&bytes).is_err());
    assert!(Checkpoint::<f32>::decode(b"garbage").is_err());

    let mut bad_meta = ck.clone();
    bad_meta.meta.insert("a b".into(), "x".into());
    assert!(bad_meta.encode().is_err());
}

#[test]
fn idx_files_round_trip() {
    let data: Dataset<f32> = blobs(3, 5, 4, 0.5);
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("x.idx"), dir.path().join("y.idx"));
    std::fs::write(&ip, encode_idx_tensor(&data.images)).unwrap();
    std::fs::write(&lp, encode_idx_labels(&data.labels)).unwrap();
    let back: Dataset<f32> = load_idx_pair(&ip, &lp).unwrap();
    assert_eq!(back.images, data.images);
    assert_eq!(back.labels, data.labels);
    assert_eq!(back.num_classes, 3);

    let parsed = parse_idx(&encode_idx_labels(&[1, 300, 2])).unwrap();
    assert_eq!(parsed.values, vec![1.0, 300.0, 2.0]);

    // 2 images of 2x2 u8 pixels are scaled to [0, 1]
    let mut raw = vec![0, 0, 0x08, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    raw.extend([0, 255, 51, 102, 1, 2, 3, 4]);
    std::fs::write(&ip, &raw).unwrap();
    std::fs::write(&lp, encode_idx_labels(&[0, 1])).unwrap();
    let small: Dataset<f64> = load_idx_pair(&ip, &lp).unwrap();
    assert_eq!(small.image_shape(), (2, 2, 1));
    assert_eq!(small.images.data()[1], 1.0);
    assert!((small.images.data()[2] - 0.2).abs() < 1e-12);

    assert!(parse_idx(&[1, 0, 0x08, 1, 0, 0, 0, 0]).is_err());
    assert!(parse_idx(&[0, 0, 0x07, 1, 0, 0, 0, 0]).is_err());
    assert!(parse_idx(&[0, 0, 0x08, 1, 0, 0, 0, 3, 1, 2]).is_err());
    std::fs::write(&lp, encode_idx_labels(&[0, 1, 1])).unwrap();
    assert!(load_idx_pair::<f64>(&ip, &lp).is_err());
}

#[test]
fn labels_must_fit_the_class_count() {
    let images = Tensor::<f32>::zeros(vec![2, 2, 2, 1]).unwrap();
    assert!(Dataset::new(images.clone(), vec![0, 2], 2, "x").is_err());
    assert!(Dataset::new(images.clone(), vec![0], 2, "x").is_err());
    assert!(Dataset::new(images, vec![0, 1], 2, "x").is_ok());
    assert!(one_hot::<f32>(&[3], 3).is_err());
}

#[test]
fn split_and_normalization() {
    let data: Dataset<f64> = blobs(4, 25, 6, 0.6);
    let (tr, va) = data.split(0.2, 3).unwrap();
    assert_eq!((tr.len(), va.len()), (80, 20));
    let (tr2, va2) = data.split(0.2, 3).unwrap();
    assert_eq!((tr2.labels, va2.labels), (tr.labels.clone(), va.labels.clone()));
    let mut all: Vec<usize> = tr.class_counts().iter().zip(va.class_counts()).map(|(a, b)| a + b).collect();
    all.sort();
    assert_eq!(all, vec![25; 4]);

    let stats = tr.stats.clone();
    let field = stats.to_field();
    assert_eq!(condconv::train::ChannelStats::from_field(&field).unwrap(), stats);
    let norm = tr.normalized(&stats).unwrap();
    for c in 0..3 {
        assert!(norm.stats.mean[c].abs() < 1e-9);
        assert!((norm.stats.std[c] - 1.0).abs() < 1e-9);
    }
    assert!(data.split(0.0, 1).is_err());
    assert!(data.split(1.0, 1).is_err());
    assert!(tr.normalized(&condconv::train::ChannelStats::identity(2)).is_err());
}

#[test]
fn synthetic_data_is_seeded() {
    let a: Dataset<f32> = SyntheticSpec::parse("classes=3,per_class=4,size=5,seed=2").unwrap().generate().unwrap();
    let b: Dataset<f32> = SyntheticSpec::parse("classes=3,per_class=4,size=5,seed=2").unwrap().generate().unwrap();
    let c: Dataset<f32> = SyntheticSpec::parse("classes=3,per_class=4,size=5,seed=3").unwrap().generate().unwrap();
    assert_eq!(a, b);
    assert_ne!(a.images, c.images);
    assert_eq!(a.class_counts(), vec![4; 3]);
    assert_eq!(a.image_shape(), (5, 5, 3));
    assert!(SyntheticSpec::parse("colour=1").is_err());
}
