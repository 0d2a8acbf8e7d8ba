//! Geometric primitives: Euclidean distance, exact k-nearest-neighbor search
//! and Lloyd's k-means.
//!
//! All searches are brute force. Per-point work may run on the rayon pool,
//! but every reduction happens sequentially in sample order, so results do not
//! depend on the number of worker threads.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;

use crate::data::FeatureSet;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) fn squared_l2(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Euclidean distance between two vectors of equal length.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(squared_l2(ArrayView1::from(a), ArrayView1::from(b)).sqrt())
}

/// Scales every nonzero row to unit L2 norm. Zero rows pass through.
pub fn normalize_l2(fs: &FeatureSet) -> FeatureSet {
    fs.with_features(normalize_rows(fs.features()))
        .expect("normalization preserves shape and finiteness")
}

pub(crate) fn normalize_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    out
}

/// Ascending by distance, then by index.
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` rows of `data` closest to `query` as `(index, squared distance)`,
/// ascending by distance with ties broken by lower index. `exclude` removes
/// one row (the query itself) from consideration.
pub fn nearest_rows(
    data: ArrayView2<'_, f64>,
    query: ArrayView1<'_, f64>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<(usize, f64)> {
    let mut cands: Vec<(f64, usize)> = data
        .outer_iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, row)| (squared_l2(query, row), j))
        .collect();
    let k = k.min(cands.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, by_distance_then_index);
        cands.truncate(k);
    }
    cands.sort_unstable_by(by_distance_then_index);
    cands.into_iter().map(|(d, j)| (j, d)).collect()
}

/// Indices of the `k` nearest neighbors of sample `query` (itself excluded).
pub fn knn(fs: &FeatureSet, query: usize, k: usize) -> Result<Vec<usize>> {
    let n = fs.n_samples();
    if k == 0 || k >= n {
        return Err(Error::KOutOfRange { k, n });
    }
    if query >= n {
        return Err(Error::InvalidData(format!(
            "query index {query} out of range for {n} samples"
        )));
    }
    Ok(nearest_rows(fs.features(), fs.row(query), k, Some(query))
        .into_iter()
        .map(|(j, _)| j)
        .collect())
}

/// How the first centroids are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KMeansInit {
    /// `z` distinct samples drawn uniformly without replacement.
    Random,
    /// Greedy D²-weighted sampling (k-means++).
    PlusPlus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tol: f64,
    pub init: KMeansInit,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            init: KMeansInit::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub n_iterations: usize,
    /// Sum of squared distances from each sample to its assigned centroid.
    pub inertia: f64,
    /// Inertia measured after each assignment step.
    pub inertia_trace: Vec<f64>,
}

/// Lloyd's algorithm from randomly drawn initial centroids.
pub fn kmeans(fs: &FeatureSet, z: usize, rng: &mut Rng, params: &KMeansParams) -> Result<KMeansResult> {
    let n = fs.n_samples();
    if z == 0 || z > n {
        return Err(Error::TooManyClusters { z, n });
    }
    let x = fs.features();
    let init = match params.init {
        KMeansInit::Random => rng.sample_distinct(n, z),
        KMeansInit::PlusPlus => plus_plus_indices(x, z, rng),
    };
    kmeans_from(fs, x.select(Axis(0), &init), params)
}

/// Greedy k-means++: each new centroid is the best of `2 + ln z` candidates
/// drawn with probability proportional to the squared distance to the
/// nearest centroid so far.
fn plus_plus_indices(x: ArrayView2<'_, f64>, z: usize, rng: &mut Rng) -> Vec<usize> {
    let n = x.nrows();
    let first = rng.sample_distinct(n, 1)[0];
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = x.outer_iter().map(|r| squared_l2(r, x.row(first))).collect();
    let n_candidates = 2 + (z as f64).ln() as usize;
    while chosen.len() < z {
        let Ok(weights) = WeightedIndex::new(&d2) else {
            // every sample coincides with a centroid: fall back to uniform
            let rest: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            let next = rest[rng.sample_distinct(rest.len(), 1)[0]];
            chosen.push(next);
            continue;
        };
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..n_candidates {
            let cand = weights.sample(rng);
            let updated: Vec<f64> = x
                .outer_iter()
                .zip(&d2)
                .map(|(r, &d)| d.min(squared_l2(r, x.row(cand))))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, next, updated) = best.expect("at least one candidate");
        chosen.push(next);
        d2 = updated;
    }
    chosen
}

fn assign(x: ArrayView2<'_, f64>, centroids: &Array2<f64>) -> Vec<(usize, f64)> {
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.outer_iter().enumerate() {
                let d = squared_l2(row, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .collect()
}

/// Moves each empty cluster onto the sample farthest from its current
/// centroid, taken from a cluster that can spare it. Returns whether any
/// cluster was reseeded.
fn reseed_empty(
    x: ArrayView2<'_, f64>,
    centroids: &mut Array2<f64>,
    assignment: &mut [(usize, f64)],
) -> bool {
    let z = centroids.nrows();
    let mut counts = vec![0usize; z];
    for &(c, _) in assignment.iter() {
        counts[c] += 1;
    }
    let mut reseeded = false;
    for empty in 0..z {
        if counts[empty] > 0 {
            continue;
        }
        let donor = assignment
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| counts[*c] > 1)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        let Some(i) = donor else { break };
        counts[assignment[i].0] -= 1;
        counts[empty] = 1;
        assignment[i] = (empty, 0.0);
        centroids.row_mut(empty).assign(&x.row(i));
        reseeded = true;
    }
    reseeded
}

fn update_centroids(x: ArrayView2<'_, f64>, centroids: &mut Array2<f64>, assignment: &[(usize, f64)]) {
    let mut sums = Array2::<f64>::zeros(centroids.dim());
    let mut counts = vec![0usize; centroids.nrows()];
    for (row, &(c, _)) in x.outer_iter().zip(assignment) {
        let mut s = sums.row_mut(c);
        s += &row;
        counts[c] += 1;
    }
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let mean = &sums.row(c) / count as f64;
            centroids.row_mut(c).assign(&mean);
        }
    }
}

/// Lloyd's algorithm starting from explicit centroids (one per row).
pub fn kmeans_from(fs: &FeatureSet, initial: Array2<f64>, params: &KMeansParams) -> Result<KMeansResult> {
    let x = fs.features();
    if initial.nrows() == 0 || initial.nrows() > x.nrows() {
        return Err(Error::TooManyClusters {
            z: initial.nrows(),
            n: x.nrows(),
        });
    }
    if initial.ncols() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            actual: initial.ncols(),
        });
    }
    let mut centroids = initial;
    let mut previous: Option<Vec<usize>> = None;
    let mut trace = Vec::new();
    let mut assignment = Vec::new();
    let mut n_iterations = 0;

    for iter in 1..=params.max_iter.max(1) {
        n_iterations = iter;
        assignment = assign(x, &centroids);
        let changed = previous
            .as_ref()
            .is_none_or(|p| p.iter().zip(&assignment).any(|(a, (b, _))| a != b));
        let reseeded = reseed_empty(x, &mut centroids, &mut assignment);
        let inertia: f64 = assignment.iter().map(|(_, d)| d).sum();
        let prior = trace.last().copied();
        trace.push(inertia);
        if !changed && !reseeded {
            break;
        }
        update_centroids(x, &mut centroids, &assignment);
        if let Some(prior) = prior {
            if !reseeded && (prior - inertia) <= params.tol * prior {
                break;
            }
        }
        previous = Some(assignment.iter().map(|(c, _)| *c).collect());
    }

    let assignments: Vec<usize> = assignment.iter().map(|(c, _)| *c).collect();
    let inertia = x
        .outer_iter()
        .zip(&assignments)
        .map(|(row, &c)| squared_l2(row, centroids.row(c)))
        .sum();
    Ok(KMeansResult {
        assignments,
        centroids,
        n_iterations,
        inertia,
        inertia_trace: trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn line(points: &[f64]) -> FeatureSet {
        FeatureSet::unlabeled(Array2::from_shape_vec((points.len(), 1), points.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(l2_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(l2_distance(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn distance_matches_naive_loop() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let a: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
            let mut acc = 0.0;
            for i in 0..64 {
                let diff = a[i] - b[i];
                acc += diff * diff;
            }
            let expected = acc.sqrt();
            let got = l2_distance(&a, &b).unwrap();
            assert!((got - expected).abs() <= 1e-12 * expected);
            assert_eq!(got, l2_distance(&b, &a).unwrap());
        }
    }

    #[test]
    fn normalization() {
        let fs = FeatureSet::unlabeled(array![[3.0, 4.0], [0.0, 0.0]]).unwrap();
        let out = normalize_l2(&fs);
        assert!((out.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((out.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(out.row(1).to_vec(), vec![0.0, 0.0]);

        let mut rng = Rng::new(1);
        let x = Array2::from_shape_fn((40, 7), |_| rng.normal() * 5.0);
        let fs = FeatureSet::unlabeled(x).unwrap();
        let once = normalize_l2(&fs);
        for row in once.features().outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
        }
        let twice = normalize_l2(&once);
        for (a, b) in once.features().iter().zip(twice.features().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn knn_on_a_line() {
        let fs = line(&[0.0, 1.0, 3.0, 7.0]);
        assert_eq!(knn(&fs, 0, 2).unwrap(), vec![1, 2]);
        assert_eq!(knn(&fs, 3, 3).unwrap(), vec![2, 1, 0]);
        assert!(knn(&fs, 0, 0).is_err());
        assert!(knn(&fs, 0, 4).is_err());
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let fs = line(&[5.0, 0.0, 0.0, 10.0, 0.0]);
        assert_eq!(knn(&fs, 0, 4).unwrap(), vec![1, 2, 3, 4]);
        let fs = line(&[5.0, 0.0, 4.0, 10.0, 6.0]);
        assert_eq!(knn(&fs, 0, 4).unwrap(), vec![2, 4, 1, 3]);
        let fs = line(&[1.0, -1.0, 0.0]);
        assert_eq!(knn(&fs, 2, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn kmeans_single_cluster_is_global_mean() {
        let fs = line(&[1.0, 2.0, 6.0]);
        let res = kmeans(&fs, 1, &mut Rng::new(0), &KMeansParams::default()).unwrap();
        assert_eq!(res.assignments, vec![0, 0, 0]);
        assert!((res.centroids[[0, 0]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_every_point_its_own_cluster() {
        let fs = line(&[1.0, 2.0, 6.0, -4.0]);
        let res = kmeans(&fs, 4, &mut Rng::new(5), &KMeansParams::default()).unwrap();
        assert_eq!(res.inertia, 0.0);
        let mut a = res.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn kmeans_forced_init_hand_example() {
        let fs = line(&[0.0, 0.1, 10.0, 10.1]);
        let res = kmeans_from(&fs, array![[0.0], [10.0]], &KMeansParams::default()).unwrap();
        assert_eq!(res.assignments, vec![0, 0, 1, 1]);
        assert!((res.centroids[[0, 0]] - 0.05).abs() < 1e-12);
        assert!((res.centroids[[1, 0]] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn kmeans_rejects_too_many_clusters() {
        let fs = line(&[0.0, 1.0]);
        assert!(matches!(
            kmeans(&fs, 3, &mut Rng::new(0), &KMeansParams::default()),
            Err(Error::TooManyClusters { z: 3, n: 2 })
        ));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // both initial centroids far right; the left one captures nothing
        let fs = line(&[0.0, 0.2, 0.4, 9.0, 9.2]);
        let res = kmeans_from(&fs, array![[9.1], [100.0]], &KMeansParams::default()).unwrap();
        let mut counts = [0; 2];
        for &a in &res.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        assert_eq!(res.assignments[0], res.assignments[2]);
        assert_ne!(res.assignments[0], res.assignments[3]);
    }

    #[test]
    fn plus_plus_init_distinct_with_duplicates() {
        let fs = line(&[1.0, 1.0, 1.0, 2.0]);
        let idx = plus_plus_indices(fs.features(), 4, &mut Rng::new(2));
        let mut s = idx.clone();
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 4);
    }
}
