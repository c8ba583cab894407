//! Elementwise helpers used outside of a recorded graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{bail, Result};
use crate::numerics::tensor::Tensor4;

pub fn relu(t: &Tensor4) -> Tensor4 {
    t.map(|v| v.max(0.0))
}

/// Sign with `sign(0) = 0`.
pub fn sign(t: &Tensor4) -> Tensor4 {
    t.map(sign_scalar)
}

pub(crate) fn sign_scalar(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn clamp(t: &Tensor4, lo: f64, hi: f64) -> Result<Tensor4> {
    if lo > hi {
        bail!(InvalidArgument, "clamp bounds inverted: lo {lo} > hi {hi}");
    }
    Ok(t.map(|v| v.clamp(lo, hi)))
}

pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    a.zip_map(b, |x, y| x + y)
}

pub fn sub(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    a.zip_map(b, |x, y| x - y)
}

pub fn scale(t: &Tensor4, alpha: f64) -> Tensor4 {
    t.map(|v| v * alpha)
}

pub fn l2_norm(t: &Tensor4) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn linf_norm(t: &Tensor4) -> f64 {
    t.max_abs()
}

/// Per-batch-item L2 norms.
pub fn item_l2_norms(t: &Tensor4) -> Vec<f64> {
    (0..t.shape().n)
        .map(|i| t.item_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Per-batch-item L∞ norms.
pub fn item_linf_norms(t: &Tensor4) -> Vec<f64> {
    (0..t.shape().n)
        .map(|i| crate::numerics::tensor::max_abs(t.item_slice(i)))
        .collect()
}

/// Zero-mean Gaussian noise of standard deviation `sigma`, shaped like `like`.
pub fn gaussian_noise(like: &Tensor4, sigma: f64, seed: u64) -> Result<Tensor4> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        bail!(InvalidArgument, "noise sigma must be finite and >= 0, got {sigma}");
    }
    if sigma == 0.0 {
        return Ok(Tensor4::zeros(like.shape()));
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated above");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..like.len()).map(|_| normal.sample(&mut rng)).collect();
    Tensor4::new(like.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Shape4;

    #[test]
    fn scalar_examples() {
        let t = Tensor4::new(Shape4::new(1, 1, 1, 2), vec![-2.0, 1.2]).unwrap();
        assert_eq!(relu(&t).data(), &[0.0, 1.2]);
        assert_eq!(clamp(&t, 0.0, 1.0).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(sign(&t).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn clamp_rejects_inverted_bounds() {
        let t = Tensor4::zeros(Shape4::scalar());
        assert!(clamp(&t, 1.0, 0.0).is_err());
    }

    #[test]
    fn norms() {
        let t = Tensor4::new(Shape4::new(1, 1, 1, 2), vec![3.0, -4.0]).unwrap();
        assert_eq!(l2_norm(&t), 5.0);
        assert_eq!(linf_norm(&t), 4.0);
    }

    #[test]
    fn noise_std_is_close_to_sigma() {
        let like = Tensor4::zeros(Shape4::new(1, 1, 1000, 1000));
        let n = gaussian_noise(&like, 0.1, 7).unwrap();
        let mean = n.mean();
        let var = n.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.len() as f64;
        let std = var.sqrt();
        assert!((0.099..=0.101).contains(&std), "std {std}");
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let like = Tensor4::zeros(Shape4::new(2, 3, 4, 4));
        assert_eq!(
            gaussian_noise(&like, 0.2, 3).unwrap(),
            gaussian_noise(&like, 0.2, 3).unwrap()
        );
        assert_ne!(
            gaussian_noise(&like, 0.2, 3).unwrap(),
            gaussian_noise(&like, 0.2, 4).unwrap()
        );
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let like = Tensor4::zeros(Shape4::scalar());
        assert!(gaussian_noise(&like, -0.1, 0).is_err());
    }
}
