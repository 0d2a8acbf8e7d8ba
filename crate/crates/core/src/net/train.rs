//! Mini-batch SGD over one or two data streams.
//!
//! Each step draws one labeled mini-batch and one pseudo-labeled mini-batch;
//! each stream has its own shuffling generator and cycles independently, so a
//! supervised-only run with the same seed sees exactly the same labeled
//! batches as the joint run. Step gradients use per-sample mean losses.

use ndarray::{ArrayView2, Axis};

use super::loss::{manifold_stream, supervised_stream, Heads, LabeledBatch, LossBreakdown, PseudoBatch, Reduction};
use super::NetworkParams;
use crate::error::{Error, Result};
use crate::rng::Rng;

const STREAM_LABELED: u64 = 1;
const STREAM_PSEUDO: u64 = 2;
/// Full-stream evaluation is chunked to bound memory.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaMode {
    /// Use `TrainConfig::lambda` throughout.
    Fixed,
    /// Train one warm-up epoch with `TrainConfig::lambda`, then set
    /// `lambda = L_s / L_m` from full-stream losses and keep it.
    AutoBalance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub lambda: f64,
    pub lambda_mode: LambdaMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Overrides the number of steps per epoch, which otherwise is the batch
    /// count of the larger stream.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_s: 0.0005,
            lambda_m: 0.0005,
            lambda: 1.0,
            lambda_mode: LambdaMode::Fixed,
            learning_rate: 0.01,
            epochs: 20,
            batch_size: 64,
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let non_negative = |key: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be finite and non-negative, got {v}")))
            }
        };
        non_negative("train.lambda_s", self.lambda_s)?;
        non_negative("train.lambda_m", self.lambda_m)?;
        non_negative("train.lambda", self.lambda)?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("train.steps_per_epoch", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LabeledStream<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [usize],
}

#[derive(Debug, Clone, Copy)]
pub struct PseudoStream<'a> {
    pub x: ArrayView2<'a, f64>,
    /// `N x T`
    pub labels: ArrayView2<'a, usize>,
}

/// The streams available to [`train`]. An absent or empty stream is skipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainData<'a> {
    pub labeled: Option<LabeledStream<'a>>,
    pub pseudo: Option<PseudoStream<'a>>,
}

impl<'a> TrainData<'a> {
    fn labeled(&self) -> Option<LabeledStream<'a>> {
        self.labeled.filter(|s| s.x.nrows() > 0)
    }

    fn pseudo(&self) -> Option<PseudoStream<'a>> {
        self.pseudo.filter(|s| s.x.nrows() > 0)
    }
}

/// Mean per-step losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub supervised: f64,
    pub manifold: f64,
    pub total: f64,
}

/// The measurement that fixed `lambda` under [`LambdaMode::AutoBalance`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BalanceRecord {
    /// Epochs completed before the measurement.
    pub after_epoch: usize,
    pub supervised: f64,
    pub manifold: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub trace: Vec<EpochRecord>,
    pub balance: Option<BalanceRecord>,
    pub steps_per_epoch: usize,
}

/// Endless shuffled pass over `0..n` in chunks of `batch`; reshuffles on wrap.
struct BatchCycler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchCycler {
    fn new(n: usize, batch: usize, rng: Rng) -> Self {
        let mut c = Self {
            order: (0..n).collect(),
            pos: n,
            batch,
            rng,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

fn batches(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Full-stream mean losses (no gradient) at `params`.
pub fn evaluate_streams(params: &NetworkParams, data: &TrainData<'_>, cfg: &TrainConfig, lambda: f64) -> Result<LossBreakdown> {
    let mut out = LossBreakdown::default();
    if let Some(s) = data.labeled() {
        let n = s.x.nrows();
        let mut ce = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let batch = LabeledBatch {
                x: s.x.slice(ndarray::s![start..end, ..]),
                y: &s.y[start..end],
            };
            ce += supervised_stream(params, batch, 0.0, Reduction::Sum, None)?;
            start = end;
        }
        let reg = params.backbone_weight_norm()
            + params.supervised_head.as_ref().map_or(0.0, |h| h.squared_weight_norm());
        out.supervised = ce / n as f64 + cfg.lambda_s * reg;
    }
    if let Some(s) = data.pseudo() {
        let n = s.x.nrows();
        let mut ce = 0.0;
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let batch = PseudoBatch {
                x: s.x.slice(ndarray::s![start..end, ..]),
                labels: s.labels.slice(ndarray::s![start..end, ..]),
                heads: Heads::All,
            };
            ce += manifold_stream(params, batch, 0.0, Reduction::Sum, None)?;
            start = end;
        }
        let reg = params.backbone_weight_norm()
            + params.pseudo_heads.iter().map(|h| h.squared_weight_norm()).sum::<f64>();
        out.manifold = ce / n as f64 + cfg.lambda_m * reg;
    }
    out.total = out.supervised + lambda * out.manifold;
    Ok(out)
}

/// Trains `params` on whichever streams are present.
///
/// With only a labeled stream this is plain supervised training, with only a
/// pseudo stream it is manifold-only training, and with both it is the joint
/// objective `L_s + lambda * L_m`.
pub fn train(mut params: NetworkParams, data: &TrainData<'_>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labeled = data.labeled();
    let pseudo = data.pseudo();
    if labeled.is_none() && pseudo.is_none() {
        return Err(Error::Empty("training needs at least one non-empty stream".into()));
    }
    if let Some(s) = labeled {
        if s.y.len() != s.x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: s.x.nrows(),
                actual: s.y.len(),
            });
        }
    }
    if let Some(s) = pseudo {
        if s.labels.nrows() != s.x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: s.x.nrows(),
                actual: s.labels.nrows(),
            });
        }
    }

    let b = cfg.batch_size;
    let steps = cfg.steps_per_epoch.unwrap_or_else(|| {
        labeled
            .map_or(0, |s| batches(s.x.nrows(), b))
            .max(pseudo.map_or(0, |s| batches(s.x.nrows(), b)))
    });
    let mut labeled_batches = labeled.map(|s| BatchCycler::new(s.x.nrows(), b, Rng::derived(cfg.seed, &[STREAM_LABELED])));
    let mut pseudo_batches = pseudo.map(|s| BatchCycler::new(s.x.nrows(), b, Rng::derived(cfg.seed, &[STREAM_PSEUDO])));

    let mut lambda = cfg.lambda;
    let mut balance = None;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut sums = LossBreakdown::default();
        for step in 0..steps {
            let mut grad = params.zeros_like();
            let mut ls = 0.0;
            let mut lm = 0.0;
            if let (Some(s), Some(cycler)) = (labeled, labeled_batches.as_mut()) {
                let idx = cycler.next_batch();
                let x = s.x.select(Axis(0), &idx);
                let y: Vec<usize> = idx.iter().map(|&i| s.y[i]).collect();
                ls = supervised_stream(
                    &params,
                    LabeledBatch { x: x.view(), y: &y },
                    cfg.lambda_s,
                    Reduction::Mean,
                    Some((&mut grad, 1.0)),
                )?;
            }
            if let (Some(s), Some(cycler)) = (pseudo, pseudo_batches.as_mut()) {
                let idx = cycler.next_batch();
                let x = s.x.select(Axis(0), &idx);
                let labels = s.labels.select(Axis(0), &idx);
                let batch = PseudoBatch {
                    x: x.view(),
                    labels: labels.view(),
                    heads: Heads::All,
                };
                let g = (lambda != 0.0).then_some((&mut grad, lambda));
                lm = manifold_stream(&params, batch, cfg.lambda_m, Reduction::Mean, g)?;
            }
            let total = ls + lambda * lm;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("epoch {epoch}, batch {step}"),
                });
            }
            sums.supervised += ls;
            sums.manifold += lm;
            sums.total += total;
            params.add_scaled(-cfg.learning_rate, &grad);
        }
        let n = steps.max(1) as f64;
        trace.push(EpochRecord {
            epoch,
            lambda,
            supervised: sums.supervised / n,
            manifold: sums.manifold / n,
            total: sums.total / n,
        });
        log::debug!("epoch {epoch}: {:?}", trace.last().unwrap());

        if epoch == 0 && cfg.lambda_mode == LambdaMode::AutoBalance && labeled.is_some() && pseudo.is_some() {
            let measured = evaluate_streams(&params, data, cfg, lambda)?;
            if measured.manifold > 0.0 {
                lambda = measured.supervised / measured.manifold;
            }
            balance = Some(BalanceRecord {
                after_epoch: 1,
                supervised: measured.supervised,
                manifold: measured.manifold,
                lambda,
            });
        }
    }

    Ok(TrainOutcome {
        params,
        trace,
        balance,
        steps_per_epoch: steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, NetworkSpec};
    use ndarray::Array2;

    fn setup() -> (NetworkParams, Array2<f64>, Vec<usize>, Array2<usize>) {
        let spec = NetworkSpec {
            input_dim: 2,
            hidden_dims: vec![8],
            activation: Activation::Relu,
            n_classes: 2,
            n_trials: 2,
            n_pseudo_classes: 3,
        };
        let mut rng = Rng::new(10);
        let params = NetworkParams::init(&spec, &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((50, 2), || rng.normal());
        let y = (0..50).map(|i| usize::from(x[[i, 0]] > 0.0)).collect();
        let labels = Array2::from_shape_fn((50, 2), |(i, t)| {
            if t == 0 {
                usize::from(x[[i, 1]] > 0.0)
            } else {
                2
            }
        });
        (params, x, y, labels)
    }

    #[test]
    fn cycler_visits_everything_then_reshuffles() {
        let mut c = BatchCycler::new(10, 4, Rng::new(1));
        let mut seen: Vec<usize> = (0..3).flat_map(|_| c.next_batch()).collect();
        assert_eq!(seen.len(), 10);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(c.next_batch().len(), 4);
    }

    #[test]
    fn tiny_learning_rate_leaves_params_unchanged() {
        let (params, x, y, _) = setup();
        let data = TrainData {
            labeled: Some(LabeledStream { x: x.view(), y: &y }),
            pseudo: None,
        };
        let cfg = TrainConfig { learning_rate: 1e-300, epochs: 2, ..TrainConfig::default() };
        let out = train(params.clone(), &data, &cfg).unwrap();
        for (a, b) in out.params.tensors().iter().zip(params.tensors()) {
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() <= 1e-250);
            }
        }
    }

    #[test]
    fn joint_training_is_reproducible() {
        let (params, x, y, labels) = setup();
        let data = TrainData {
            labeled: Some(LabeledStream { x: x.view(), y: &y }),
            pseudo: Some(PseudoStream { x: x.view(), labels: labels.view() }),
        };
        let cfg = TrainConfig { epochs: 3, batch_size: 8, lambda_mode: LambdaMode::AutoBalance, ..TrainConfig::default() };
        let a = train(params.clone(), &data, &cfg).unwrap();
        let b = train(params, &data, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
        assert!(a.balance.is_some());
    }

    #[test]
    fn supervised_training_reduces_loss() {
        let (params, x, y, _) = setup();
        let data = TrainData {
            labeled: Some(LabeledStream { x: x.view(), y: &y }),
            pseudo: None,
        };
        let cfg = TrainConfig { epochs: 30, batch_size: 10, learning_rate: 0.1, ..TrainConfig::default() };
        let out = train(params, &data, &cfg).unwrap();
        assert!(out.trace.last().unwrap().total < 0.6 * out.trace[0].total);
    }

    #[test]
    fn empty_streams_are_rejected() {
        let (params, _, _, _) = setup();
        assert!(train(params, &TrainData::default(), &TrainConfig::default()).is_err());
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let (params, x, y, _) = setup();
        let data = TrainData {
            labeled: Some(LabeledStream { x: x.view(), y: &y }),
            pseudo: None,
        };
        let cfg = TrainConfig { learning_rate: 1e200, epochs: 3, batch_size: 10, ..TrainConfig::default() };
        match train(params, &data, &cfg) {
            Err(Error::NonFiniteLoss { context }) => assert!(context.contains("epoch"), "{context}"),
            other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.trace)),
        }
    }
}
