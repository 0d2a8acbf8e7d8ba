//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use mfnet::data::{FeatureSet, SplitSpec};
use mfnet::neighbors::l2_distance;
use mfnet::net::{Activation, NetworkParams, NetworkSpec};
use mfnet::rng::Rng;
use mfnet::synth;
use ndarray::{Array2, Axis};

/// `k` centers in `[-10, 10]^d`, redrawn until every pair is at least
/// `min_dist` apart.
pub fn separated_centers(k: usize, d: usize, min_dist: f64, rng: &mut Rng) -> Array2<f64> {
    let mut centers = Array2::zeros((k, d));
    let mut filled = 0;
    while filled < k {
        let cand: Vec<f64> = (0..d).map(|_| rng.symmetric(10.0)).collect();
        let far = (0..filled).all(|j| l2_distance(&cand, centers.row(j).as_slice().unwrap()).unwrap() >= min_dist);
        if far {
            centers.row_mut(filled).assign(&ndarray::ArrayView1::from(&cand[..]));
            filled += 1;
        }
    }
    centers
}

/// Five unit-variance blobs in 16 dimensions, centers at least `5 * sqrt(16)`
/// apart.
pub fn separated_blobs(n: usize, seed: u64) -> FeatureSet {
    let mut rng = Rng::new(seed);
    let centers = separated_centers(5, 16, 20.0, &mut rng);
    synth::blobs_around(&centers, n, 1.0, &mut rng).unwrap()
}

/// `n_test` random test samples, then `per_class` labeled samples per class
/// from the rest; everything else is unlabeled.
pub fn class_balanced_split(fs: &FeatureSet, per_class: usize, n_test: usize, seed: u64) -> SplitSpec {
    let mut rng = Rng::new(seed ^ 0xabc);
    let mut idx: Vec<usize> = (0..fs.n_samples()).collect();
    rng.shuffle(&mut idx);
    let test = idx[..n_test].to_vec();
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut counts = vec![0; fs.n_classes()];
    for &i in &idx[n_test..] {
        let c = fs.label(i).unwrap();
        if counts[c] < per_class {
            counts[c] += 1;
            labeled.push(i);
        } else {
            unlabeled.push(i);
        }
    }
    SplitSpec { labeled, unlabeled, test }
}

/// Teacher, student and evaluation sets for the imitation harness: five
/// tight classes in `d` dimensions (the teacher) observed through isotropic
/// noise of scale `sigma` (the student). The first `n_train` items train, the
/// rest evaluate.
pub fn imitation_fixture(n_train: usize, n_eval: usize, d: usize, sigma: f64, seed: u64) -> (FeatureSet, FeatureSet, FeatureSet) {
    let mut rng = Rng::new(1000 + seed);
    let n = n_train + n_eval;
    let centers = Array2::from_shape_simple_fn((5, d), || rng.symmetric(1.0));
    let clean = synth::blobs_around(&centers, n, 0.1, &mut rng).unwrap();
    let noise = Array2::from_shape_simple_fn((n, d), || sigma * rng.normal());
    let noisy = &clean.features() + &noise;
    let labels = clean.dense_labels().unwrap();
    let train: Vec<usize> = (0..n_train).collect();
    let eval: Vec<usize> = (n_train..n).collect();
    let teacher = clean.subset(&train).unwrap();
    let student = FeatureSet::unlabeled(noisy.select(Axis(0), &train)).unwrap();
    let eval = FeatureSet::labeled(noisy.select(Axis(0), &eval), &labels[n_train..], Some(5)).unwrap();
    (teacher, student, eval)
}

pub fn small_spec(rng: &mut Rng, activation: Activation) -> NetworkSpec {
    let depth = rng.sample_distinct(3, 1)[0];
    NetworkSpec {
        input_dim: 1 + rng.sample_distinct(16, 1)[0],
        hidden_dims: (0..depth).map(|_| 1 + rng.sample_distinct(6, 1)[0]).collect(),
        activation,
        n_classes: 2 + rng.sample_distinct(3, 1)[0],
        n_trials: 1 + rng.sample_distinct(4, 1)[0],
        n_pseudo_classes: 2 + rng.sample_distinct(3, 1)[0],
    }
}

/// Random parameters with non-zero biases, so every code path is exercised.
pub fn random_params(spec: &NetworkSpec, rng: &mut Rng) -> NetworkParams {
    let mut p = NetworkParams::init(spec, rng).unwrap();
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    p
}

pub fn random_matrix(n: usize, d: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.normal())
}
