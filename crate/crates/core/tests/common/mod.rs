//! Reference implementations shared by the integration tests: direct loop
//! kernels, finite differences and error metrics.
#![allow(dead_code)]

use condconv::autodiff::Graph;
use condconv::condconv::ExecutionStrategy;
use condconv::model::{ForwardConfig, Model};
use condconv::train::one_hot;
use condconv::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi)).unwrap()
}

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, rng)
}

/// Output extent and leading pad of "same" padding.
pub fn same_geometry(input: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(input);
    (out, total / 2)
}

pub fn valid_geometry(input: usize, k: usize, stride: usize) -> (usize, usize) {
    ((input - k) / stride + 1, 0)
}

fn geometry(input: usize, k: usize, stride: usize, same: bool) -> (usize, usize) {
    if same {
        same_geometry(input, k, stride)
    } else {
        valid_geometry(input, k, stride)
    }
}

/// Direct seven-loop convolution, NHWC input and `[k,k,Cin,Cout]` kernel.
/// Counts one multiply-accumulate per kernel tap, zero-padded taps included.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, same: bool, macs: &mut u64) -> Tensor<f64> {
    let [b, h, wd, cin] = x.shape().try_into().unwrap();
    let [kh, kw, wcin, cout] = w.shape().try_into().unwrap();
    assert_eq!(cin, wcin);
    let (oh, ph) = geometry(h, kh, stride, same);
    let (ow, pw) = geometry(wd, kw, stride, same);
    let mut out = vec![0.0; b * oh * ow * cout];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - ph as isize;
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                *macs += cin as u64;
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x.at(&[n, iy as usize, ix as usize, ci]) * w.at(&[ky, kx, ci, co]);
                                *macs += 1;
                            }
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, cout], out).unwrap()
}

/// Direct depthwise convolution with kernel `[k,k,C,1]`.
pub fn naive_depthwise(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, same: bool, macs: &mut u64) -> Tensor<f64> {
    let [b, h, wd, c] = x.shape().try_into().unwrap();
    let [kh, kw, wc, one] = w.shape().try_into().unwrap();
    assert_eq!((wc, one), (c, 1));
    let (oh, ph) = geometry(h, kh, stride, same);
    let (ow, pw) = geometry(wd, kw, stride, same);
    let mut out = vec![0.0; b * oh * ow * c];
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - ph as isize;
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            *macs += 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.at(&[n, iy as usize, ix as usize, ch]) * w.at(&[ky, kx, ch, 0]);
                        }
                    }
                    out[((n * oh + oy) * ow + ox) * c + ch] = acc;
                }
            }
        }
    }
    Tensor::new(vec![b, oh, ow, c], out).unwrap()
}

pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>, macs: &mut u64) -> Tensor<f64> {
    let [m, k] = a.shape().try_into().unwrap();
    let [k2, n] = b.shape().try_into().unwrap();
    assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.at(&[i, l]) * b.at(&[l, j]);
                *macs += 1;
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

pub fn naive_gap(x: &Tensor<f64>) -> Tensor<f64> {
    let [b, h, w, c] = x.shape().try_into().unwrap();
    Tensor::from_fn(vec![b, c], |i| {
        let (n, ch) = (i / c, i % c);
        let mut s = 0.0;
        for y in 0..h {
            for xx in 0..w {
                s += x.at(&[n, y, xx, ch]);
            }
        }
        s / (h * w) as f64
    })
    .unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Central differences of a scalar function of one tensor.
pub fn fd_grad(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).unwrap()
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn cast64(t: &Tensor<f32>) -> Tensor<f64> {
    t.cast()
}

/// Mean cross-entropy of a model on a fixed batch.
pub fn model_loss(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], strategy: ExecutionStrategy) -> f64 {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pass = model.forward(&mut g, xv, &mut ForwardConfig::eval(strategy)).unwrap();
    let targets = one_hot(labels, model.spec().num_classes).unwrap();
    let loss = g.softmax_cross_entropy(pass.logits, targets).unwrap();
    g.value(loss).data()[0]
}

/// Autodiff gradients of [`model_loss`] with respect to every parameter.
pub fn model_grads(model: &Model<f64>, x: &Tensor<f64>, labels: &[usize], strategy: ExecutionStrategy) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pass = model.forward(&mut g, xv, &mut ForwardConfig::grad(strategy)).unwrap();
    let targets = one_hot(labels, model.spec().num_classes).unwrap();
    let loss = g.softmax_cross_entropy(pass.logits, targets).unwrap();
    let grads = g.backward(loss).unwrap();
    pass.params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.wrt(v, &p.value))
        .collect()
}

/// Replaces every parameter with seeded values: experts and kernels keep
/// their scale, routers, shifts and biases get non-zero entries so that no
/// pre-activation sits exactly on a ReLU kink. A zero `router_scale` keeps
/// the routers as initialized.
pub fn randomize_params(model: &mut Model<f64>, rng: &mut impl Rng, router_scale: f64) {
    use condconv::model::ParamRole;
    for i in 0..model.params().len() {
        let p = &model.params()[i];
        let shape = p.value.shape().to_vec();
        let v = match p.role {
            ParamRole::Kernel | ParamRole::Experts => p.value.clone(),
            ParamRole::Routing if router_scale == 0.0 => p.value.clone(),
            ParamRole::Routing => uniform(&shape, -router_scale, router_scale, rng),
            ParamRole::Scale => uniform(&shape, 0.5, 1.5, rng),
            ParamRole::Shift | ParamRole::Bias => uniform(&shape, -0.5, 0.5, rng),
        };
        model.set_param(i, v).unwrap();
    }
}

/// Direct-loop forward pass of a model whose routers are linear (sigmoid or
/// softmax), reading parameters by name. Each router is evaluated from the
/// activation entering its first consumer and reused by the rest.
pub fn naive_forward(model: &Model<f64>, x: &Tensor<f64>, softmax_routing: bool) -> Tensor<f64> {
    use condconv::spec::LayerKind;
    let get = |name: &str| model.params()[model.find_param(name).unwrap_or_else(|| panic!("no param {name}"))].value.clone();
    let mut h = x.clone();
    let mut alphas: std::collections::BTreeMap<usize, Tensor<f64>> = Default::default();
    for (i, l) in model.spec().layers.iter().enumerate() {
        if l.kind == LayerKind::GlobalPool {
            h = naive_gap(&h);
            continue;
        }
        let tag = format!("l{i:02}.{}", l.kind.as_str());
        let same = l.padding == condconv::ops::Padding::Same;
        let apply = |inp: &Tensor<f64>, k: &Tensor<f64>| match l.kind {
            LayerKind::Conv | LayerKind::Pointwise => naive_conv2d(inp, k, l.stride, same, &mut 0),
            LayerKind::Depthwise => naive_depthwise(inp, k, l.stride, same, &mut 0),
            _ => naive_matmul(inp, k, &mut 0),
        };
        let y = if l.condconv {
            let id = model.plan().assignment[&i];
            let alpha = alphas
                .entry(id)
                .or_insert_with(|| {
                    let pooled = if h.rank() == 4 { naive_gap(&h) } else { h.clone() };
                    let z = naive_matmul(&pooled, &get(&format!("router{id}.w0")), &mut 0);
                    let n = z.shape()[1];
                    if softmax_routing {
                        Tensor::from_fn(z.shape().to_vec(), |j| {
                            let row = &z.data()[j / n * n..j / n * n + n];
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            (z.data()[j] - m).exp() / row.iter().map(|v| (v - m).exp()).sum::<f64>()
                        })
                        .unwrap()
                    } else {
                        z.map(sigmoid)
                    }
                })
                .clone();
            let experts = get(&format!("{tag}.experts"));
            let n = experts.shape()[0];
            let rows: Vec<Tensor<f64>> = (0..h.shape()[0])
                .map(|b| {
                    let mut k = experts.index_first(0).unwrap().zeros_like();
                    for e in 0..n {
                        k.axpy(alpha.at(&[b, e]), &experts.index_first(e).unwrap()).unwrap();
                    }
                    let mut shape = h.shape().to_vec();
                    shape[0] = 1;
                    apply(&h.index_first(b).unwrap().reshape(shape).unwrap(), &k).index_first(0).unwrap()
                })
                .collect();
            Tensor::stack(&rows).unwrap()
        } else {
            apply(&h, &get(&format!("{tag}.kernel")))
        };
        h = if l.kind.is_spatial() {
            let (s, t) = (get(&format!("{tag}.scale")), get(&format!("{tag}.shift")));
            let c = l.cout;
            Tensor::from_fn(y.shape().to_vec(), |j| (y.data()[j] * s.data()[j % c] + t.data()[j % c]).max(0.0)).unwrap()
        } else {
            let bias = get(&format!("{tag}.bias"));
            let c = l.cout;
            Tensor::from_fn(y.shape().to_vec(), |j| y.data()[j] + bias.data()[j % c]).unwrap()
        };
    }
    h
}
