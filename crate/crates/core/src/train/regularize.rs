//! Dropout, mixup and expert dropout.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Beta, Distribution};

use crate::condconv::RoutingWeights;
use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inverted-dropout mask: survivors are scaled by `1/keep_prob`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], keep_prob: f64, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return config_err(format!("keep probability must be in (0, 1], got {keep_prob}"));
    }
    let scale = T::of(1.0 / keep_prob);
    Tensor::from_fn(shape.to_vec(), |_| {
        if rng.random::<f64>() < keep_prob {
            scale
        } else {
            T::zero()
        }
    })
}

/// 0/1 mask zeroing each entry with probability `rate`.
pub fn expert_dropout_mask<T: Scalar>(shape: &[usize], rate: f64, rng: &mut dyn RngCore) -> Result<Tensor<T>> {
    check_rate(rate)?;
    Tensor::from_fn(shape.to_vec(), |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            T::one()
        }
    })
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return config_err(format!("expert dropout rate must be in [0, 1), got {rate}"));
    }
    Ok(())
}

/// Zeroes routing weights independently with probability `rate` while
/// training. Survivors keep their value.
pub fn expert_dropout<T: Scalar>(
    alpha: &RoutingWeights<T>,
    rate: f64,
    rng: &mut dyn RngCore,
    training: bool,
) -> Result<RoutingWeights<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(alpha.clone());
    }
    let mask = expert_dropout_mask::<T>(alpha.alpha.shape(), rate, rng)?;
    RoutingWeights::new(alpha.alpha.zip_map(&mask, |a, m| a * m)?)
}

pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Result<Tensor<T>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return config_err(format!("label {bad} out of range for {num_classes} classes"));
    }
    let mut t = Tensor::zeros(vec![labels.len().max(1), num_classes])?;
    let d = t.data_mut();
    for (b, &l) in labels.iter().enumerate() {
        d[b * num_classes + l] = T::one();
    }
    Ok(t)
}

/// Mixes a batch with a shuffled copy of itself using `lambda`.
pub fn mixup_with<T: Scalar>(
    images: &Tensor<T>,
    targets: &Tensor<T>,
    lambda: f64,
    partner: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let b = images.shape()[0];
    if targets.shape()[0] != b || partner.len() != b {
        return crate::error::shape_err("mixup: images, targets and permutation disagree on batch size");
    }
    let mix = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let per = t.len() / b;
        let (l, r) = (T::of(lambda), T::of(1.0 - lambda));
        let src = t.data();
        let mut out = Vec::with_capacity(t.len());
        for (i, &j) in partner.iter().enumerate() {
            let a = &src[i * per..(i + 1) * per];
            let c = &src[j * per..(j + 1) * per];
            out.extend(a.iter().zip(c).map(|(&x, &y)| l * x + r * y));
        }
        Tensor::new(t.shape().to_vec(), out)
    };
    Ok((mix(images)?, mix(targets)?))
}

/// Mixup with `lambda ~ Beta(alpha, alpha)`; `alpha <= 0` disables it.
pub fn mixup<T: Scalar>(
    images: &Tensor<T>,
    targets: &Tensor<T>,
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if alpha <= 0.0 {
        return Ok((images.clone(), targets.clone()));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| crate::error::Error::Config(format!("mixup alpha: {e}")))?;
    let lambda = beta.sample(rng);
    let mut partner: Vec<usize> = (0..images.shape()[0]).collect();
    partner.shuffle(rng);
    mixup_with(images, targets, lambda, &partner)
}
