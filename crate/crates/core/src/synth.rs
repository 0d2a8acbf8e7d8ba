//! Synthetic labeled fixtures.

use ndarray::Array2;

use crate::data::FeatureSet;
use crate::error::Result;
use crate::rng::Rng;

/// Isotropic Gaussian blobs with centers drawn uniformly in
/// `[-center_box, center_box]^dim`. Samples are assigned to blobs round-robin
/// so class sizes differ by at most one.
pub fn gaussian_blobs(n: usize, n_blobs: usize, dim: usize, std: f64, center_box: f64, rng: &mut Rng) -> Result<FeatureSet> {
    let centers = Array2::from_shape_simple_fn((n_blobs, dim), || rng.symmetric(center_box));
    blobs_around(&centers, n, std, rng)
}

/// Blobs around the given centers, one class per center row.
pub fn blobs_around(centers: &Array2<f64>, n: usize, std: f64, rng: &mut Rng) -> Result<FeatureSet> {
    let (k, dim) = centers.dim();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut x = Array2::zeros((n, dim));
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..dim {
            x[[i, j]] = centers[[c, j]] + std * rng.normal();
        }
    }
    FeatureSet::labeled(x, &labels, Some(k))
}

/// Two interleaving half circles with Gaussian noise; first half is class 0.
pub fn two_moons(n: usize, noise: f64, rng: &mut Rng) -> Result<FeatureSet> {
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let mut x = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let a = std::f64::consts::PI * i as f64 / (n_outer.max(2) - 1) as f64;
        x[[i, 0]] = a.cos();
        x[[i, 1]] = a.sin();
        labels.push(0);
    }
    for i in 0..n_inner {
        let a = std::f64::consts::PI * i as f64 / (n_inner.max(2) - 1) as f64;
        x[[n_outer + i, 0]] = 1.0 - a.cos();
        x[[n_outer + i, 1]] = 0.5 - a.sin();
        labels.push(1);
    }
    x.mapv_inplace(|v| v + noise * rng.normal());
    FeatureSet::labeled(x, &labels, Some(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_balance() {
        let fs = gaussian_blobs(103, 5, 4, 0.1, 10.0, &mut Rng::new(1)).unwrap();
        assert_eq!((fs.n_samples(), fs.dim(), fs.n_classes()), (103, 4, 5));
        let moons = two_moons(21, 0.0, &mut Rng::new(1)).unwrap();
        assert_eq!(moons.dense_labels().unwrap().iter().filter(|&&c| c == 0).count(), 10);
        assert!((moons.row(0)[0] - 1.0).abs() < 1e-12);
    }
}
