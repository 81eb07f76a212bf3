//! Generator and discriminator objectives. Each loss returns its value in
//! f64; the `*_grad` companions return the gradient with respect to the
//! candidate input, scaled by a caller-provided weight.

use serde::{Deserialize, Serialize};

use crate::error::{RegenError, Result};
use crate::features::RandomFeatureNet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub adversarial: f64,
    pub feature_matching: f64,
    pub perceptual: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adversarial: 1.0,
            feature_matching: 10.0,
            perceptual: 10.0,
            l1: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("adversarial", self.adversarial),
            ("feature_matching", self.feature_matching),
            ("perceptual", self.perceptual),
            ("l1", self.l1),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RegenError::config(
                    format!("loss_weights.{name}"),
                    format!("must be a finite value >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(RegenError::invalid(format!("{what} contains non-finite values")))
    }
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(RegenError::Shape(format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn label(target_is_real: bool) -> f64 {
    if target_is_real {
        1.0
    } else {
        0.0
    }
}

/// Least-squares GAN loss: mean over scales of the mean squared distance of
/// each score map from the target label.
pub fn adversarial_loss<T: Scalar>(scores: &[&Tensor<T>], target_is_real: bool) -> Result<f64> {
    if scores.is_empty() {
        return Err(RegenError::invalid("adversarial loss over an empty scale list"));
    }
    let y = label(target_is_real);
    let mut total = 0.0;
    for s in scores {
        check_finite(s, "score map")?;
        let sq: f64 = s.data().iter().map(|v| (v.to_f64_lossy() - y).powi(2)).sum();
        total += sq / s.len() as f64;
    }
    Ok(total / scores.len() as f64)
}

pub fn adversarial_grad<T: Scalar>(scores: &[&Tensor<T>], target_is_real: bool, weight: f64) -> Vec<Tensor<T>> {
    let y = T::from_f64_lossy(label(target_is_real));
    scores
        .iter()
        .map(|s| {
            let k = T::from_f64_lossy(2.0 * weight / (s.len() as f64 * scores.len() as f64));
            s.map(|v| (v - y) * k)
        })
        .collect()
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn mean_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).abs())
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// Gradient of `weight * mean|a - b|` with respect to `a`.
fn mean_abs_diff_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, weight: f64) -> Result<Tensor<T>> {
    let k = T::from_f64_lossy(weight / a.len().max(1) as f64);
    a.zip_map(b, |x, y| sign(x - y) * k)
}

fn check_layout<T: Scalar>(real: &[&[Tensor<T>]], fake: &[&[Tensor<T>]]) -> Result<()> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(RegenError::Shape(format!(
            "feature matching over {} real and {} fake scales",
            real.len(),
            fake.len()
        )));
    }
    for (r, f) in real.iter().zip(fake) {
        if r.is_empty() || r.len() != f.len() {
            return Err(RegenError::Shape(format!("{} real vs {} fake layers", r.len(), f.len())));
        }
    }
    Ok(())
}

/// Mean absolute difference between matching activations, averaged over
/// layers within each scale and then over scales.
pub fn feature_matching_loss<T: Scalar>(real: &[&[Tensor<T>]], fake: &[&[Tensor<T>]]) -> Result<f64> {
    check_layout(real, fake)?;
    let mut total = 0.0;
    for (r, f) in real.iter().zip(fake) {
        let mut scale = 0.0;
        for (a, b) in r.iter().zip(f.iter()) {
            scale += mean_abs_diff(b, a)?;
        }
        total += scale / r.len() as f64;
    }
    Ok(total / real.len() as f64)
}

/// Gradient with respect to each fake activation.
pub fn feature_matching_grad<T: Scalar>(
    real: &[&[Tensor<T>]],
    fake: &[&[Tensor<T>]],
    weight: f64,
) -> Result<Vec<Vec<Tensor<T>>>> {
    check_layout(real, fake)?;
    real.iter()
        .zip(fake)
        .map(|(r, f)| {
            let w = weight / (r.len() as f64 * real.len() as f64);
            r.iter().zip(f.iter()).map(|(a, b)| mean_abs_diff_grad(b, a, w)).collect()
        })
        .collect()
}

pub fn l1_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    mean_abs_diff(a, b)
}

pub fn l1_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, weight: f64) -> Result<Tensor<T>> {
    check_same(a, b)?;
    mean_abs_diff_grad(a, b, weight)
}

const PERCEPTUAL_SEED: u64 = 0x7e2c_e9a1;
const PERCEPTUAL_WIDTHS: [usize; 3] = [16, 32, 64];
const PERCEPTUAL_LAYER_WEIGHTS: [f64; 3] = [0.25, 0.5, 1.0];

/// Weighted L1 distance between multi-layer activations of a frozen,
/// fixed-seed convolutional feature network.
#[derive(Debug, Clone)]
pub struct PerceptualLoss<T: Scalar> {
    net: RandomFeatureNet<T>,
    layer_weights: Vec<f64>,
}

impl<T: Scalar> Default for PerceptualLoss<T> {
    fn default() -> Self {
        PerceptualLoss {
            net: RandomFeatureNet::new(&PERCEPTUAL_WIDTHS, PERCEPTUAL_SEED),
            layer_weights: PERCEPTUAL_LAYER_WEIGHTS.to_vec(),
        }
    }
}

impl<T: Scalar> PerceptualLoss<T> {
    pub fn layer_weights(&self) -> &[f64] {
        &self.layer_weights
    }

    pub fn activations(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.net.features(x)
    }

    /// The loss from precomputed activations.
    pub fn from_activations(&self, a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<f64> {
        if a.len() != self.layer_weights.len() || b.len() != self.layer_weights.len() {
            return Err(RegenError::Shape("activation count does not match layer weights".into()));
        }
        let mut total = 0.0;
        for ((x, y), w) in a.iter().zip(b).zip(&self.layer_weights) {
            total += w * mean_abs_diff(x, y)?;
        }
        Ok(total)
    }

    pub fn loss(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
        check_same(a, b)?;
        self.from_activations(&self.activations(a)?, &self.activations(b)?)
    }

    /// Loss and `weight`-scaled gradient with respect to `a`; `b` is held fixed.
    pub fn loss_and_grad(&mut self, a: &Tensor<T>, b: &Tensor<T>, weight: f64) -> Result<(f64, Tensor<T>)> {
        check_same(a, b)?;
        let fb = self.net.features(b)?;
        let fa = self.net.forward(a)?;
        let value = self.from_activations(&fa, &fb)?;
        let grads = fa
            .iter()
            .zip(&fb)
            .zip(&self.layer_weights)
            .map(|((x, y), w)| mean_abs_diff_grad(x, y, weight * w))
            .collect::<Result<Vec<_>>>()?;
        let g = self.net.backward(&grads)?;
        self.net.clear_cache();
        Ok((value, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn adversarial_examples() {
        let ones = Tensor::<f64>::full(Shape::new(1, 1, 3, 3), 1.0);
        let zeros = Tensor::<f64>::zeros(Shape::new(1, 1, 3, 3));
        let halves = Tensor::<f64>::full(Shape::new(1, 1, 5, 4), 0.5);
        assert_eq!(adversarial_loss(&[&ones], true).unwrap(), 0.0);
        assert_eq!(adversarial_loss(&[&zeros], true).unwrap(), 1.0);
        assert_eq!(adversarial_loss(&[&halves, &ones.map(|_| 0.5)], false).unwrap(), 0.25);
        assert!(adversarial_loss::<f64>(&[], true).is_err());
        let nan = ones.map(|_| f64::NAN);
        assert!(adversarial_loss(&[&nan], true).is_err());
    }

    #[test]
    fn feature_matching_examples() {
        let a = [random(Shape::new(1, 2, 4, 4), 1), random(Shape::new(1, 3, 2, 2), 2)];
        let b: Vec<_> = a.iter().map(|t| t.map(|v| v + 1.0)).collect();
        let c = vec![random(Shape::new(1, 2, 4, 4), 3), random(Shape::new(1, 3, 2, 2), 4)];
        assert_eq!(feature_matching_loss(&[&a[..]], &[&a[..]]).unwrap(), 0.0);
        assert!((feature_matching_loss(&[&a[..], &a[..]], &[&b[..], &b[..]]).unwrap() - 1.0).abs() < 1e-12);
        // naive loop
        let mut naive = 0.0;
        for (x, y) in a.iter().zip(&c) {
            let mut s = 0.0;
            for i in 0..x.len() {
                s += (x.data()[i] - y.data()[i]).abs();
            }
            naive += s / x.len() as f64;
        }
        naive /= 2.0;
        assert!((feature_matching_loss(&[&a[..]], &[&c[..]]).unwrap() - naive).abs() < 1e-12);
        assert!(feature_matching_loss(&[&a[..]], &[&c[..1]]).is_err());
    }

    #[test]
    fn perceptual_is_symmetric_and_zero_on_equal() {
        let p = PerceptualLoss::<f64>::default();
        let a = random(Shape::new(1, 3, 16, 16), 5);
        let b = random(Shape::new(1, 3, 16, 16), 6);
        assert_eq!(p.loss(&a, &a).unwrap(), 0.0);
        assert!((p.loss(&a, &b).unwrap() - p.loss(&b, &a).unwrap()).abs() < 1e-12);
        assert!(p.loss(&a, &b).unwrap() > 0.0);
        let fa = p.activations(&a).unwrap();
        let fb = p.activations(&b).unwrap();
        assert_eq!(p.from_activations(&fa, &fb).unwrap(), p.loss(&a, &b).unwrap());
        assert!(p.loss(&a, &random(Shape::new(1, 3, 8, 16), 1)).is_err());
    }

    #[test]
    fn perceptual_grad_matches_finite_differences() {
        let mut p = PerceptualLoss::<f64>::default();
        let a = random(Shape::new(1, 3, 8, 8), 7);
        let b = random(Shape::new(1, 3, 8, 8), 8);
        let (_, g) = p.loss_and_grad(&a, &b, 2.0).unwrap();
        for &i in &[0usize, 33, 100, 191] {
            let (mut ap, mut am) = (a.clone(), a.clone());
            ap.data_mut()[i] += 1e-6;
            am.data_mut()[i] -= 1e-6;
            let fd = 2.0 * (p.loss(&ap, &b).unwrap() - p.loss(&am, &b).unwrap()) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6, "{fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            l1: -1.0,
            ..LossWeights::default()
        };
        assert!(w.validate().is_err());
    }
}
