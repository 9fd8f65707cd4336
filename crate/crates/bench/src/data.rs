//! Regression targets and dataset generation.

use std::f64::consts::PI;

use kan_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Problem};
use crate::error::{BenchError, Result};

/// `cos(4πx') + sin(πy') + sin(2πy') + |sin(3πy'²)|` where `(x', y')` is
/// `(x, y)` rotated counterclockwise by `rotation` radians.
pub fn target_nonsmooth(x: f64, y: f64, rotation: f64) -> f64 {
    let (s, c) = rotation.sin_cos();
    let xr = x * c - y * s;
    let yr = x * s + y * c;
    (4.0 * PI * xr).cos() + (PI * yr).sin() + (2.0 * PI * yr).sin() + (3.0 * PI * yr * yr).sin().abs()
}

/// Smoothed XOR `tanh(20x - 10) tanh(20x - 40y + 10)`.
pub fn target_xor(x: f64, y: f64) -> f64 {
    (20.0 * x - 10.0).tanh() * (20.0 * x - 40.0 * y + 10.0).tanh()
}

/// Affine map applied to the raw targets: `y_norm = (y - min) / (max - min)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetAffine {
    pub min: f64,
    pub max: f64,
}

impl TargetAffine {
    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.min) / (self.max - self.min)
    }

    /// Raw-scale MSE from a normalized-scale MSE.
    pub fn raw_mse(&self, mse: f64) -> f64 {
        mse * (self.max - self.min).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `D × 2` inputs.
    pub x: Tensor,
    /// `D × 1` targets normalized to `[0, 1]`.
    pub y: Tensor,
    pub affine: TargetAffine,
}

/// Samples `data_count` points uniformly on the configured square with the
/// data seed and normalizes the targets onto `[0, 1]`.
pub fn gen_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let [lo, hi] = cfg.domain;
    if !(lo < hi) || cfg.data_count < 2 {
        return Err(BenchError::Config(format!("domain {:?} with {} points", cfg.domain, cfg.data_count)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let d = cfg.data_count;
    let x: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(lo..hi)).collect();
    let raw: Vec<f64> = x
        .chunks(2)
        .map(|p| match cfg.problem {
            Problem::Nonsmooth => target_nonsmooth(p[0], p[1], cfg.rotation),
            Problem::Xor => target_xor(p[0], p[1]),
        })
        .collect();
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Err(BenchError::Config("targets are constant on the sampled data".into()));
    }
    let affine = TargetAffine { min, max };
    let y = raw.iter().map(|&v| affine.normalize(v)).collect();
    Ok(Dataset {
        x: Tensor::new(vec![d, 2], x)?,
        y: Tensor::new(vec![d, 1], y)?,
        affine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nonsmooth_values() {
        assert_eq!(target_nonsmooth(0.0, 0.0, 0.0), 1.0);
        assert!((target_nonsmooth(0.5, 0.5, 0.175) - 0.884_762_735_607_476_7).abs() < 1e-14);
        assert!((target_nonsmooth(0.3, 0.8, 0.175) + 0.384_911_500_428_316_4).abs() < 1e-14);
        let (x, y) = (0.37, 0.81);
        let base = (4.0 * PI * x).cos() + (PI * y).sin() + (2.0 * PI * y).sin() + (3.0 * PI * y * y).sin().abs();
        assert_eq!(target_nonsmooth(x, y, 0.0), base);
    }

    #[test]
    fn xor_values() {
        for y in [0.0, 0.3, 1.0] {
            assert_eq!(target_xor(0.5, y), 0.0);
        }
        assert!((target_xor(1.0, 0.0) - 0.999_999_995_877_692_8).abs() < 1e-15);
        assert!((target_xor(0.25, 0.25) + 0.999_818_416_769_056_2).abs() < 1e-15);
    }

    #[test]
    fn dataset_is_normalized_and_deterministic() {
        let mut cfg = ExperimentConfig::default();
        cfg.data_count = 100;
        let a = gen_dataset(&cfg).unwrap();
        let b = gen_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x.rows(), 100);
        let ys = a.y.data();
        assert_eq!(ys.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(ys.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        assert!(a.x.data().iter().all(|v| (0.0001..0.9999).contains(v)));
        cfg.data_seed = 1;
        assert_ne!(gen_dataset(&cfg).unwrap().x, a.x);
    }
}
