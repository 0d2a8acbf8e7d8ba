use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ndarray::Axis;

use super::config::{Command, RunConfig};
use crate::data::{FeatureSet, PseudoLabelEnsemble, SplitSpec};
use crate::ems::run_ems;
use crate::neighbors::normalize_l2;
use crate::net::{self, LabeledStream, NetworkParams, NetworkSpec, PseudoStream, TrainData};
use crate::rng::Rng;
use crate::tasks::{self, ImitationSetup, MetricsReport, SemiSupSetup};

/// What a command produced, besides the files it wrote.
#[derive(Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    /// Every file written, artifact first.
    pub written: Vec<PathBuf>,
}

enum Artifact {
    Pseudo(PseudoLabelEnsemble),
    Model(NetworkParams),
    None,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn load_features(path: &Path) -> anyhow::Result<FeatureSet> {
    FeatureSet::load(path).with_context(|| format!("loading features from {}", path.display()))
}

/// Runs the configured command and writes its artifact, the `key=value`
/// report (`<out>.report`), its JSON form (`<out>.report.json`) and the
/// effective configuration (`<out>.config`).
pub fn execute(cfg: &RunConfig) -> anyhow::Result<RunOutput> {
    let out = match cfg.command {
        Command::Evaluate => cfg.paths.out.clone(),
        _ => Some(cfg.paths.require("out")?.to_path_buf()),
    };
    let (report, artifact) = match cfg.command {
        Command::Segment => segment(cfg)?,
        Command::Train => train(cfg)?,
        Command::Evaluate => (evaluate(cfg)?, Artifact::None),
        Command::Imitate => imitate(cfg)?,
        Command::Semisup => semisup(cfg)?,
    };
    let mut written = Vec::new();
    if let Some(out) = out {
        match artifact {
            Artifact::Pseudo(e) => e.save(&out)?,
            Artifact::Model(p) => net::save_model(&p, &out)?,
            Artifact::None => {}
        }
        if cfg.command != Command::Evaluate {
            written.push(out.clone());
        }
        let files = [
            (with_suffix(&out, ".report"), report.to_text()),
            (with_suffix(&out, ".report.json"), report.to_json()),
            (with_suffix(&out, ".config"), cfg.to_text()),
        ];
        for (path, text) in files {
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
    }
    Ok(RunOutput { report, written })
}

fn segment(cfg: &RunConfig) -> anyhow::Result<(MetricsReport, Artifact)> {
    let raw = load_features(cfg.paths.require("input")?)?;
    let fs_ = if cfg.normalize { normalize_l2(&raw) } else { raw };
    let ensemble = run_ems(&fs_, &cfg.ems_config())?;
    let mut report = MetricsReport::default();
    report.push("n_samples", fs_.n_samples() as f64);
    report.push("n_trials", ensemble.n_trials() as f64);
    report.push("n_pseudo_classes", ensemble.n_pseudo_classes() as f64);
    if let Some(truth) = fs_.dense_labels() {
        let p = tasks::mean_purity(&ensemble, &truth)?;
        report.purity = Some(p);
        report.push("mean_purity", p);
    }
    Ok((report, Artifact::Pseudo(ensemble)))
}

fn train(cfg: &RunConfig) -> anyhow::Result<(MetricsReport, Artifact)> {
    let fs_ = load_features(cfg.paths.require("input")?)?;
    let n = fs_.n_samples();
    let ensemble = match &cfg.paths.pseudo {
        Some(p) => Some(PseudoLabelEnsemble::load(p).with_context(|| format!("loading pseudo-labels from {}", p.display()))?),
        None => None,
    };
    if let Some(e) = &ensemble {
        if e.n_samples() != n {
            bail!("pseudo-labels cover {} samples but the input has {n}", e.n_samples());
        }
    }
    let split = match &cfg.paths.split {
        Some(p) => {
            let s = SplitSpec::load(p)?;
            s.validate(n)?;
            Some(s)
        }
        None => None,
    };
    let labeled_idx: Vec<usize> = match &split {
        Some(s) => s.labeled.clone(),
        None => (0..n).filter(|&i| fs_.label(i).is_some()).collect(),
    };
    let pseudo_idx: Vec<usize> = match (&split, &ensemble) {
        (_, None) => Vec::new(),
        (Some(s), Some(_)) => s.unlabeled.clone(),
        (None, Some(_)) => (0..n).collect(),
    };
    if labeled_idx.is_empty() && pseudo_idx.is_empty() {
        bail!("nothing to train on: no labeled samples and no pseudo-labels (pass --pseudo)");
    }

    let x = fs_.features();
    let x_l = x.select(Axis(0), &labeled_idx);
    let y_l: Vec<usize> = labeled_idx
        .iter()
        .map(|&i| fs_.label(i).with_context(|| format!("labeled sample {i} has no label")))
        .collect::<anyhow::Result<_>>()?;
    let x_u = x.select(Axis(0), &pseudo_idx);
    let pseudo_labels = ensemble.as_ref().map(|e| e.labels().select(Axis(0), &pseudo_idx));

    let spec = NetworkSpec {
        input_dim: fs_.dim(),
        hidden_dims: cfg.net.hidden_dims.clone(),
        activation: cfg.net.activation,
        n_classes: if labeled_idx.is_empty() { 0 } else { fs_.n_classes() },
        n_trials: ensemble.as_ref().map_or(0, |e| e.n_trials()),
        n_pseudo_classes: ensemble.as_ref().map_or(0, |e| e.n_pseudo_classes()),
    };
    let train_cfg = cfg.train_config();
    let params = NetworkParams::init(&spec, &mut Rng::derived(train_cfg.seed, &[0]))?;
    let data = TrainData {
        labeled: (!labeled_idx.is_empty()).then(|| LabeledStream { x: x_l.view(), y: &y_l }),
        pseudo: pseudo_labels.as_ref().map(|l| PseudoStream {
            x: x_u.view(),
            labels: l.view(),
        }),
    };
    let outcome = net::train(params, &data, &train_cfg)?;

    let mut report = MetricsReport::default();
    if let Some(last) = outcome.trace.last() {
        report.push("final_supervised_loss", last.supervised);
        report.push("final_manifold_loss", last.manifold);
        report.push("final_total_loss", last.total);
        report.push("lambda", last.lambda);
    }
    if let Some(b) = outcome.balance {
        report.push("balance_supervised_loss", b.supervised);
        report.push("balance_manifold_loss", b.manifold);
    }
    if let Some(s) = split.as_ref().filter(|s| !s.test.is_empty() && spec.n_classes > 0) {
        let truth: Vec<usize> = s
            .test
            .iter()
            .map(|&i| fs_.label(i).with_context(|| format!("test sample {i} has no label")))
            .collect::<anyhow::Result<_>>()?;
        let acc = tasks::accuracy(&outcome.params.predict(x.select(Axis(0), &s.test).view())?, &truth)?;
        report.accuracy = Some(acc);
        report.push("test_accuracy", acc);
    }
    report.trace = outcome.trace;
    Ok((report, Artifact::Model(outcome.params)))
}

fn evaluate(cfg: &RunConfig) -> anyhow::Result<MetricsReport> {
    let model_path = cfg.paths.require("model")?;
    let params = net::load_model(model_path).with_context(|| format!("loading model from {}", model_path.display()))?;
    let fs_ = load_features(cfg.paths.require("input")?)?;
    let mut report = tasks::evaluate_model(&params, &fs_, cfg.retrieval)?;
    if let Some(p) = &cfg.paths.pseudo {
        let ensemble = PseudoLabelEnsemble::load(p)?;
        let truth = fs_.dense_labels().expect("checked by evaluate_model");
        let purity = tasks::mean_purity(&ensemble, &truth)?;
        report.purity = Some(purity);
        report.push("mean_purity", purity);
    }
    Ok(report)
}

fn imitate(cfg: &RunConfig) -> anyhow::Result<(MetricsReport, Artifact)> {
    let setup = ImitationSetup {
        teacher: load_features(cfg.paths.require("teacher")?)?,
        student: load_features(cfg.paths.require("student")?)?,
        eval: load_features(cfg.paths.require("eval")?)?,
        ems: cfg.ems_config(),
        train: cfg.train_config(),
        hidden_dims: cfg.net.hidden_dims.clone(),
        activation: cfg.net.activation,
        retrieval: cfg.retrieval,
        normalize: cfg.normalize,
    };
    let (params, report) = tasks::run_imitation(setup)?;
    Ok((report, Artifact::Model(params)))
}

fn semisup(cfg: &RunConfig) -> anyhow::Result<(MetricsReport, Artifact)> {
    let split_path = cfg.paths.require("split")?;
    let setup = SemiSupSetup {
        features: load_features(cfg.paths.require("input")?)?,
        split: SplitSpec::load(split_path).with_context(|| format!("loading split from {}", split_path.display()))?,
        ems: cfg.ems_config(),
        train: cfg.train_config(),
        hidden_dims: cfg.net.hidden_dims.clone(),
        activation: cfg.net.activation,
        refine_rounds: cfg.refine_rounds,
        normalize: cfg.normalize,
    };
    let (params, report) = tasks::run_semisup(setup)?;
    Ok((report, Artifact::Model(params)))
}
