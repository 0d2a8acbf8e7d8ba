//! Evaluation metrics and the two experiment harnesses: model imitation and
//! semi-supervised classification with iterative re-segmentation.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::data::{FeatureSet, PseudoLabelEnsemble, SplitSpec};
use crate::ems::{run_ems, EmsConfig};
use crate::error::{Error, Result};
use crate::neighbors::{nearest_rows, normalize_l2, normalize_rows};
use crate::net::{
    self, Activation, EpochRecord, LabeledStream, NetworkParams, NetworkSpec, PseudoStream, TrainConfig, TrainData,
};
use crate::rng::{derive_seed, Rng};

const INIT_STREAM: u64 = 0;
const HEAD_RESET_STREAM: u64 = 3;

/// How queries and gallery are drawn from an evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalProtocol {
    /// Every sample queries all the others.
    #[default]
    LeaveOneOut,
    /// Even positions query, odd positions form the gallery.
    SplitHalves,
}

impl FromStr for RetrievalProtocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "leave_one_out" | "loo" => Ok(Self::LeaveOneOut),
            "split_halves" => Ok(Self::SplitHalves),
            other => Err(format!("unknown retrieval protocol `{other}` (expected leave_one_out or split_halves)")),
        }
    }
}

impl std::fmt::Display for RetrievalProtocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LeaveOneOut => "leave_one_out",
            Self::SplitHalves => "split_halves",
        })
    }
}

/// Fraction of queries whose nearest gallery item (L2, lowest index on ties)
/// shares the query's label. Query and gallery are distinct sets.
pub fn recall_at_1(
    query: ArrayView2<'_, f64>,
    query_labels: &[usize],
    gallery: ArrayView2<'_, f64>,
    gallery_labels: &[usize],
) -> Result<f64> {
    check_rows(query, query_labels)?;
    check_rows(gallery, gallery_labels)?;
    if gallery.nrows() == 0 {
        return Err(Error::Empty("recall@1 needs a non-empty gallery".into()));
    }
    if query.ncols() != gallery.ncols() {
        return Err(Error::DimensionMismatch {
            expected: gallery.ncols(),
            actual: query.ncols(),
        });
    }
    hit_rate(query.nrows(), |i| {
        let (j, _) = nearest_rows(gallery, query.row(i), 1, None)[0];
        gallery_labels[j] == query_labels[i]
    })
}

/// Recall@1 with the set acting as both queries and gallery, each query's
/// own entry excluded.
pub fn recall_at_1_loo(embeddings: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    check_rows(embeddings, labels)?;
    if embeddings.nrows() < 2 {
        return Err(Error::Empty("leave-one-out recall@1 needs at least two samples".into()));
    }
    hit_rate(embeddings.nrows(), |i| {
        let (j, _) = nearest_rows(embeddings, embeddings.row(i), 1, Some(i))[0];
        labels[j] == labels[i]
    })
}

/// Recall@1 of `embeddings` under `protocol`.
pub fn retrieval_recall(embeddings: ArrayView2<'_, f64>, labels: &[usize], protocol: RetrievalProtocol) -> Result<f64> {
    match protocol {
        RetrievalProtocol::LeaveOneOut => recall_at_1_loo(embeddings, labels),
        RetrievalProtocol::SplitHalves => {
            check_rows(embeddings, labels)?;
            let q: Vec<usize> = (0..labels.len()).step_by(2).collect();
            let g: Vec<usize> = (1..labels.len()).step_by(2).collect();
            let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
            recall_at_1(
                embeddings.select(Axis(0), &q).view(),
                &pick(&q),
                embeddings.select(Axis(0), &g).view(),
                &pick(&g),
            )
        }
    }
}

fn check_rows(x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: x.nrows(),
            actual: labels.len(),
        });
    }
    Ok(())
}

fn hit_rate(n: usize, hit: impl Fn(usize) -> bool + Sync) -> Result<f64> {
    use rayon::prelude::*;
    if n == 0 {
        return Err(Error::Empty("no queries".into()));
    }
    let hits = (0..n).into_par_iter().filter(|&i| hit(i)).count();
    Ok(hits as f64 / n as f64)
}

/// Sum over clusters of the largest overlap with one true class, over N.
/// Every sample in its own cluster gives 1.0.
pub fn purity(pseudo: &[usize], truth: &[usize]) -> Result<f64> {
    if pseudo.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: pseudo.len(),
        });
    }
    if pseudo.is_empty() {
        return Err(Error::Empty("purity of an empty labeling".into()));
    }
    let rows = pseudo.iter().max().unwrap() + 1;
    let cols = truth.iter().max().unwrap() + 1;
    let mut counts = Array2::<usize>::zeros((rows, cols));
    for (&p, &t) in pseudo.iter().zip(truth) {
        counts[[p, t]] += 1;
    }
    let matched: usize = counts
        .outer_iter()
        .map(|r| r.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(matched as f64 / pseudo.len() as f64)
}

/// Mean purity of every trial of an ensemble against `truth`.
pub fn mean_purity(ensemble: &PseudoLabelEnsemble, truth: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..ensemble.n_trials() {
        total += purity(&ensemble.trial(t), truth)?;
    }
    Ok(total / ensemble.n_trials() as f64)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("accuracy of an empty set".into()));
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// One refinement round of the semi-supervised harness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    /// Mean pseudo-label purity against the hidden labels of the unlabeled
    /// set, when those labels are known.
    pub purity: Option<f64>,
    /// The stream weight in effect after balancing.
    pub lambda: f64,
    pub trace: Vec<EpochRecord>,
}

/// Metrics of one run. `values` holds the report lines in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub purity: Option<f64>,
    pub rounds: Vec<RoundRecord>,
    pub baseline_rounds: Vec<RoundRecord>,
    pub trace: Vec<EpochRecord>,
    pub values: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn push(&mut self, key: impl Into<String>, value: f64) {
        self.values.push((key.into(), value));
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// One `key=value` line per metric.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }
}

fn network_spec(input_dim: usize, hidden_dims: &[usize], activation: Activation, c: usize, ems: &EmsConfig) -> NetworkSpec {
    NetworkSpec {
        input_dim,
        hidden_dims: hidden_dims.to_vec(),
        activation,
        n_classes: c,
        n_trials: ems.t,
        n_pseudo_classes: ems.z,
    }
}

/// Inputs of the model-imitation harness.
#[derive(Debug, Clone)]
pub struct ImitationSetup {
    /// Defines the manifold; read only by segmentation.
    pub teacher: FeatureSet,
    /// Network input; row `i` is the same item as teacher row `i`.
    pub student: FeatureSet,
    /// Held-out labeled items in student space, used only for recall@1.
    pub eval: FeatureSet,
    pub ems: EmsConfig,
    pub train: TrainConfig,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub retrieval: RetrievalProtocol,
    /// L2-normalize teacher features before segmentation.
    pub normalize: bool,
}

/// Segments the teacher's feature space, then trains a network on the
/// student features against those pseudo-labels only.
///
/// Reports recall@1 on the evaluation set for the raw student features
/// (`recall_at_1_before`), the untrained network (`recall_at_1_init`) and the
/// trained network (`recall_at_1_after`).
pub fn run_imitation(setup: ImitationSetup) -> Result<(NetworkParams, MetricsReport)> {
    let ImitationSetup {
        teacher,
        student,
        eval,
        ems,
        train,
        hidden_dims,
        activation,
        retrieval,
        normalize,
    } = setup;
    if teacher.n_samples() != student.n_samples() {
        return Err(Error::DimensionMismatch {
            expected: teacher.n_samples(),
            actual: student.n_samples(),
        });
    }
    if eval.dim() != student.dim() {
        return Err(Error::DimensionMismatch {
            expected: student.dim(),
            actual: eval.dim(),
        });
    }
    let eval_labels = eval
        .dense_labels()
        .ok_or_else(|| Error::InvalidData("the evaluation set must be fully labeled".into()))?;
    ems.validate(teacher.n_samples())?;
    train.validate()?;

    let ensemble = {
        let teacher = if normalize { normalize_l2(&teacher) } else { teacher };
        run_ems(&teacher, &ems)?
    };

    let spec = network_spec(student.dim(), &hidden_dims, activation, 0, &ems);
    let params = NetworkParams::init(&spec, &mut Rng::derived(train.seed, &[INIT_STREAM]))?;

    let mut report = MetricsReport::default();
    let before = retrieval_recall(eval.features(), &eval_labels, retrieval)?;
    let init = retrieval_recall(params.embed_batch(eval.features())?.view(), &eval_labels, retrieval)?;

    let data = TrainData {
        labeled: None,
        pseudo: Some(PseudoStream {
            x: student.features(),
            labels: ensemble.labels(),
        }),
    };
    let outcome = net::train(params, &data, &train)?;
    let after = retrieval_recall(outcome.params.embed_batch(eval.features())?.view(), &eval_labels, retrieval)?;

    report.recall_at_1 = Some(after);
    report.trace = outcome.trace;
    report.push("recall_at_1_before", before);
    report.push("recall_at_1_init", init);
    report.push("recall_at_1_after", after);
    report.push("recall_at_1_gain", after - before);
    if let Some(last) = report.trace.last() {
        report.push("final_manifold_loss", last.manifold);
    }
    Ok((outcome.params, report))
}

/// Inputs of the semi-supervised harness.
#[derive(Debug, Clone)]
pub struct SemiSupSetup {
    /// Labels must be present on the labeled and test indices.
    pub features: FeatureSet,
    pub split: SplitSpec,
    pub ems: EmsConfig,
    pub train: TrainConfig,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub refine_rounds: usize,
    /// L2-normalize the raw features that seed the first segmentation.
    pub normalize: bool,
}

fn labels_at(fs: &FeatureSet, idx: &[usize], role: &str) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            fs.label(i)
                .ok_or_else(|| Error::InvalidData(format!("{role} sample {i} has no label")))
        })
        .collect()
}

/// Joint training with `refine_rounds` rounds of re-segmentation, next to a
/// supervised-only baseline that sees the same initialization, labeled
/// batches and step counts.
///
/// Round 1 segments the unlabeled features as given; later rounds segment the
/// L2-normalized embedding of the current network. Each round replaces the
/// pseudo heads and continues from the previous parameters.
pub fn run_semisup(setup: SemiSupSetup) -> Result<(NetworkParams, MetricsReport)> {
    let SemiSupSetup {
        features,
        split,
        ems,
        train,
        hidden_dims,
        activation,
        refine_rounds,
        normalize,
    } = setup;
    if refine_rounds == 0 {
        return Err(Error::config("run.refine_rounds", "must be at least 1"));
    }
    split.validate(features.n_samples())?;
    train.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::Empty("the split has no labeled samples".into()));
    }
    if split.test.is_empty() {
        return Err(Error::Empty("the split has no test samples".into()));
    }
    let c = features.n_classes();
    let x = features.features();
    let x_l = x.select(Axis(0), &split.labeled);
    let y_l = labels_at(&features, &split.labeled, "labeled")?;
    let x_t = x.select(Axis(0), &split.test);
    let y_t = labels_at(&features, &split.test, "test")?;
    let x_u = x.select(Axis(0), &split.unlabeled);
    let hidden_truth: Option<Vec<usize>> = split.unlabeled.iter().map(|&i| features.label(i)).collect();
    let n_u = split.unlabeled.len();
    if n_u > 0 {
        ems.validate(n_u)?;
    }

    let spec = network_spec(features.dim(), &hidden_dims, activation, c, &ems);
    let initial = NetworkParams::init(&spec, &mut Rng::derived(train.seed, &[INIT_STREAM]))?;
    let steps = train.steps_per_epoch.unwrap_or_else(|| {
        x_l.nrows()
            .div_ceil(train.batch_size)
            .max(n_u.div_ceil(train.batch_size))
    });
    let train = TrainConfig {
        steps_per_epoch: Some(steps),
        ..train
    };
    let mut report = MetricsReport::default();

    let mut params = initial.clone();
    for round in 1..=refine_rounds {
        let mut purity_value = None;
        let ensemble = if n_u > 0 {
            let input = if round == 1 {
                if normalize {
                    normalize_rows(x_u.view())
                } else {
                    x_u.clone()
                }
            } else {
                normalize_rows(params.embed_batch(x_u.view())?.view())
            };
            let round_cfg = EmsConfig {
                master_seed: derive_seed(ems.master_seed, &[round as u64]),
                ..ems.clone()
            };
            let ensemble = run_ems(&FeatureSet::unlabeled(input)?, &round_cfg)?;
            if let Some(truth) = &hidden_truth {
                purity_value = Some(mean_purity(&ensemble, truth)?);
            }
            params.reset_pseudo_heads(
                ems.t,
                ems.z,
                &mut Rng::derived(train.seed, &[HEAD_RESET_STREAM, round as u64]),
            );
            Some(ensemble)
        } else {
            None
        };
        let data = TrainData {
            labeled: Some(LabeledStream { x: x_l.view(), y: &y_l }),
            pseudo: ensemble.as_ref().map(|e| PseudoStream {
                x: x_u.view(),
                labels: e.labels(),
            }),
        };
        let outcome = net::train(params, &data, &train)?;
        params = outcome.params;
        let acc = accuracy(&params.predict(x_t.view())?, &y_t)?;
        let lambda = outcome.balance.map_or(train.lambda, |b| b.lambda);
        report.push(format!("round_{round}_test_accuracy"), acc);
        report.push(format!("round_{round}_lambda"), lambda);
        if let Some(p) = purity_value {
            report.push(format!("round_{round}_pseudo_purity"), p);
        }
        report.rounds.push(RoundRecord {
            round,
            test_accuracy: acc,
            purity: purity_value,
            lambda,
            trace: outcome.trace,
        });
    }

    let mut baseline = initial;
    let labeled_only = TrainData {
        labeled: Some(LabeledStream { x: x_l.view(), y: &y_l }),
        pseudo: None,
    };
    for round in 1..=refine_rounds {
        let outcome = net::train(baseline, &labeled_only, &train)?;
        baseline = outcome.params;
        let acc = accuracy(&baseline.predict(x_t.view())?, &y_t)?;
        report.baseline_rounds.push(RoundRecord {
            round,
            test_accuracy: acc,
            purity: None,
            lambda: 0.0,
            trace: outcome.trace,
        });
    }
    let joint = report.rounds.last().unwrap().test_accuracy;
    let base = report.baseline_rounds.last().unwrap().test_accuracy;
    report.accuracy = Some(joint);
    report.push("test_accuracy", joint);
    report.push("baseline_accuracy", base);
    report.push("improvement", joint - base);
    Ok((params, report))
}

/// Accuracy of the supervised head (when both it and labels exist) and
/// recall@1 of the embedding (when labels exist) on `fs`.
pub fn evaluate_model(params: &NetworkParams, fs: &FeatureSet, retrieval: RetrievalProtocol) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let Some(labels) = fs.dense_labels() else {
        return Err(Error::InvalidData("evaluation needs a fully labeled feature set".into()));
    };
    if params.supervised_head.is_some() {
        let acc = accuracy(&params.predict(fs.features())?, &labels)?;
        report.accuracy = Some(acc);
        report.push("accuracy", acc);
    }
    let recall = retrieval_recall(params.embed_batch(fs.features())?.view(), &labels, retrieval)?;
    report.recall_at_1 = Some(recall);
    report.push("recall_at_1", recall);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn purity_hand_cases() {
        assert_eq!(purity(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(purity(&[2, 2, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(purity(&[0, 1, 2, 3], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!(purity(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn recall_extremes() {
        let tight = array![[0.0], [0.1], [10.0], [10.1]];
        assert_eq!(recall_at_1_loo(tight.view(), &[0, 0, 1, 1]).unwrap(), 1.0);
        let interleaved = array![[0.0], [1.0], [2.0], [3.0]];
        assert_eq!(recall_at_1_loo(interleaved.view(), &[0, 1, 0, 1]).unwrap(), 0.0);
        let empty = Array2::<f64>::zeros((0, 1));
        assert!(recall_at_1(tight.view(), &[0, 0, 1, 1], empty.view(), &[]).is_err());
    }

    #[test]
    fn split_halves_protocol() {
        let x = array![[0.0], [0.1], [5.0], [5.1]];
        let r = retrieval_recall(x.view(), &[0, 0, 1, 1], RetrievalProtocol::SplitHalves).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn accuracy_counts_matches() {
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
    }

    #[test]
    fn report_lines() {
        let mut r = MetricsReport::default();
        r.push("round_2_test_accuracy", 0.5);
        r.push("baseline_accuracy", 0.25);
        assert_eq!(r.to_text(), "round_2_test_accuracy=0.5\nbaseline_accuracy=0.25\n");
        assert_eq!(r.get("baseline_accuracy"), Some(0.25));
    }
}
