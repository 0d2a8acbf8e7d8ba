//! Ensemble manifold segmentation.
//!
//! Each trial positions `Z` seeds with randomly initialized k-means (the data
//! sample nearest each centroid), grows every seed into a prototype set with
//! its `K` nearest neighbors, fits a multinomial logistic-regression segmenter
//! on the prototypes and finally labels the whole dataset with it. `T`
//! independent trials form the pseudo-label ensemble.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::data::{FeatureSet, PseudoLabelEnsemble};
use crate::error::{Error, Result};
use crate::neighbors::{self, KMeansInit, KMeansParams, KMeansResult};
use crate::rng::Rng;

/// How many times a trial is re-drawn after a numerical failure.
pub const MAX_TRIAL_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct EmsConfig {
    /// Pseudo-classes per trial.
    pub z: usize,
    /// Number of trials.
    pub t: usize,
    /// Neighbors grown around each seed.
    pub k: usize,
    /// L2 strength on the segmenter weights.
    pub lr_reg: f64,
    /// Iteration cap for the segmenter's gradient descent.
    pub lr_iters: usize,
    pub master_seed: u64,
    pub kmeans: KMeansParams,
}

impl Default for EmsConfig {
    fn default() -> Self {
        Self {
            z: 30,
            t: 90,
            k: 9,
            lr_reg: 1e-3,
            lr_iters: 500,
            master_seed: 0,
            kmeans: KMeansParams {
                init: KMeansInit::PlusPlus,
                ..KMeansParams::default()
            },
        }
    }
}

impl EmsConfig {
    /// Checks the configuration against a dataset of `n` samples.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.z < 2 {
            return Err(Error::config("ems.z", format!("must be at least 2, got {}", self.z)));
        }
        if self.t < 1 {
            return Err(Error::config("ems.t", "must be at least 1"));
        }
        if self.z.saturating_mul(self.k + 1) > n {
            return Err(Error::config(
                "ems.z",
                format!(
                    "z * (k + 1) = {} * {} exceeds the {n} available samples",
                    self.z,
                    self.k + 1
                ),
            ));
        }
        if !(self.lr_reg >= 0.0 && self.lr_reg.is_finite()) {
            return Err(Error::config("ems.lr_reg", "must be finite and non-negative"));
        }
        if self.lr_iters == 0 {
            return Err(Error::config("ems.lr_iters", "must be at least 1"));
        }
        if !(self.kmeans.tol >= 0.0) {
            return Err(Error::config("ems.kmeans_tol", "must be non-negative"));
        }
        Ok(())
    }
}

/// One trial's prototype training set: `(sample, pseudo-class)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedSet {
    pub trial_id: usize,
    pub n_classes: usize,
    pub members: Vec<(usize, usize)>,
}

/// A linear softmax classifier over the feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSegmenter {
    /// `Z x d`
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl LinearSegmenter {
    pub fn zeros(z: usize, d: usize) -> Self {
        Self {
            weights: Array2::zeros((z, d)),
            biases: Array1::zeros(z),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    /// Class scores `x W^T + b`, one row per sample.
    pub fn scores(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.biases
    }
}

/// The data sample nearest to each centroid, kept distinct across clusters.
pub fn seeds_from_kmeans(fs: &FeatureSet, km: &KMeansResult) -> Vec<usize> {
    let n = fs.n_samples();
    let mut taken = vec![false; n];
    let mut seeds = Vec::with_capacity(km.centroids.nrows());
    for centroid in km.centroids.outer_iter() {
        let mut best: Option<(f64, usize)> = None;
        for (i, row) in fs.features().outer_iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = neighbors::squared_l2(row, centroid);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        let (_, i) = best.expect("z <= n leaves a free sample");
        taken[i] = true;
        seeds.push(i);
    }
    seeds
}

/// Positions `z` seeds with k-means and returns their sample indices.
pub fn select_seeds(fs: &FeatureSet, z: usize, rng: &mut Rng, params: &KMeansParams) -> Result<Vec<usize>> {
    let km = neighbors::kmeans(fs, z, rng, params)?;
    Ok(seeds_from_kmeans(fs, &km))
}

/// Adds each seed's `k` nearest neighbors to the seed's pseudo-class. A sample
/// may end up in several classes.
pub fn grow_seeds(fs: &FeatureSet, seeds: &[usize], k: usize, trial_id: usize) -> Result<SeedSet> {
    let n = fs.n_samples();
    if k >= n {
        return Err(Error::KOutOfRange { k, n });
    }
    let mut seen = vec![false; n];
    for &s in seeds {
        if s >= n || std::mem::replace(&mut seen[s], true) {
            return Err(Error::InvalidData(format!("seed {s} is out of range or repeated")));
        }
    }
    let mut members = Vec::with_capacity(seeds.len() * (k + 1));
    for (class, &seed) in seeds.iter().enumerate() {
        members.push((seed, class));
        if k > 0 {
            members.extend(neighbors::knn(fs, seed, k)?.into_iter().map(|j| (j, class)));
        }
    }
    Ok(SeedSet {
        trial_id,
        n_classes: seeds.len(),
        members,
    })
}

/// Row-wise log-sum-exp.
pub(crate) fn log_sum_exp(row: ndarray::ArrayView1<'_, f64>) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy over the prototypes plus `lr_reg * ||W||^2`, with its
/// gradient with respect to weights and biases.
pub(crate) fn segmenter_objective(
    x: ArrayView2<'_, f64>,
    targets: &[usize],
    lr_reg: f64,
    seg: &LinearSegmenter,
) -> (f64, Array2<f64>, Array1<f64>) {
    let m = x.nrows() as f64;
    let mut scores = seg.scores(x);
    let mut loss = 0.0;
    for (mut row, &y) in scores.axis_iter_mut(Axis(0)).zip(targets) {
        let top = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let target = row[y];
        row.mapv_inplace(|s| (s - top).exp());
        let total = row.sum();
        loss += top + total.ln() - target;
        row.mapv_inplace(|e| e / total);
        row[y] -= 1.0;
    }
    // `scores` now holds dL/dscores (unscaled)
    let gw = scores.t().dot(&x) / m + &seg.weights * (2.0 * lr_reg);
    let gb = scores.sum_axis(Axis(0)) / m;
    let reg = lr_reg * seg.weights.iter().map(|w| w * w).sum::<f64>();
    (loss / m + reg, gw, gb)
}

/// Fits the trial's segmenter by full-batch gradient descent from zero.
///
/// Features are centered on the prototype mean while fitting; since the
/// biases are unregularized this leaves the optimum unchanged and only
/// improves conditioning.
pub fn train_segmenter(fs: &FeatureSet, seed_set: &SeedSet, cfg: &EmsConfig) -> Result<LinearSegmenter> {
    let idx: Vec<usize> = seed_set.members.iter().map(|(i, _)| *i).collect();
    let targets: Vec<usize> = seed_set.members.iter().map(|(_, c)| *c).collect();
    if idx.is_empty() {
        return Err(Error::Empty("seed set has no members".into()));
    }
    let z = seed_set.n_classes;
    let raw = fs.features().select(Axis(0), &idx);
    let mean = raw.mean_axis(Axis(0)).expect("non-empty");
    let x = &raw - &mean;

    let curvature = 0.5 * (x.iter().map(|v| v * v).sum::<f64>() / x.nrows() as f64 + 1.0) + 2.0 * cfg.lr_reg;
    let mut step = 1.0 / curvature;
    let mut seg = LinearSegmenter::zeros(z, fs.dim());
    let (mut f, mut gw, mut gb) = segmenter_objective(x.view(), &targets, cfg.lr_reg, &seg);
    let non_finite = |iter: usize| Error::NonFiniteLoss {
        context: format!("segmenter of trial {} at iteration {iter}", seed_set.trial_id),
    };
    if !f.is_finite() {
        return Err(non_finite(0));
    }

    for iter in 1..=cfg.lr_iters {
        let grad_sq = gw.iter().chain(gb.iter()).map(|g| g * g).sum::<f64>();
        if grad_sq < 1e-24 {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial = LinearSegmenter {
                weights: &seg.weights - &(&gw * step),
                biases: &seg.biases - &(&gb * step),
            };
            let (tf, tgw, tgb) = segmenter_objective(x.view(), &targets, cfg.lr_reg, &trial);
            if !tf.is_finite() {
                return Err(non_finite(iter));
            }
            if tf < f {
                let improvement = f - tf;
                seg = trial;
                f = tf;
                gw = tgw;
                gb = tgb;
                accepted = improvement > 1e-15 * f.abs().max(1e-300);
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    // undo the centering: W (x - mean) + b = W x + (b - W mean)
    let biases = &seg.biases - &seg.weights.dot(&mean);
    Ok(LinearSegmenter {
        weights: seg.weights,
        biases,
    })
}

/// Arg-max class of every sample; ties go to the lowest class index.
pub fn segment_all(fs: &FeatureSet, seg: &LinearSegmenter) -> Result<Vec<usize>> {
    if seg.weights.ncols() != fs.dim() {
        return Err(Error::DimensionMismatch {
            expected: seg.weights.ncols(),
            actual: fs.dim(),
        });
    }
    Ok(seg.scores(fs.features()).outer_iter().map(|row| argmax(row.iter().copied())).collect())
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Everything a single trial produced.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial_id: usize,
    /// Retries consumed before success.
    pub attempt: usize,
    pub seeds: Vec<usize>,
    pub seed_set: SeedSet,
    pub segmenter: LinearSegmenter,
    pub labels: Vec<usize>,
}

fn attempt_trial(fs: &FeatureSet, cfg: &EmsConfig, trial: usize, attempt: usize) -> Result<TrialOutcome> {
    let mut rng = Rng::derived(cfg.master_seed, &[trial as u64, attempt as u64]);
    let seeds = select_seeds(fs, cfg.z, &mut rng, &cfg.kmeans)?;
    let seed_set = grow_seeds(fs, &seeds, cfg.k, trial)?;
    let segmenter = train_segmenter(fs, &seed_set, cfg)?;
    let labels = segment_all(fs, &segmenter)?;
    Ok(TrialOutcome {
        trial_id: trial,
        attempt,
        seeds,
        seed_set,
        segmenter,
        labels,
    })
}

/// Runs trial `trial`, re-drawing its seed after a numerical failure.
pub fn run_trial(fs: &FeatureSet, cfg: &EmsConfig, trial: usize) -> Result<TrialOutcome> {
    let mut last = None;
    for attempt in 0..=MAX_TRIAL_RETRIES {
        match attempt_trial(fs, cfg, trial, attempt) {
            Ok(out) => return Ok(out),
            Err(e @ Error::NonFiniteLoss { .. }) => {
                log::warn!("trial {trial} attempt {attempt} failed: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::TrialFailed {
        trial,
        attempts: MAX_TRIAL_RETRIES + 1,
        last: Box::new(last.expect("at least one attempt")),
    })
}

/// Runs all `T` trials (in parallel) and assembles the `N x T` ensemble.
pub fn run_ems(fs: &FeatureSet, cfg: &EmsConfig) -> Result<PseudoLabelEnsemble> {
    cfg.validate(fs.n_samples())?;
    let columns = (0..cfg.t)
        .into_par_iter()
        .map(|t| run_trial(fs, cfg, t).map(|o| o.labels))
        .collect::<Result<Vec<_>>>()?;
    PseudoLabelEnsemble::from_columns(&columns, cfg.z)
}
