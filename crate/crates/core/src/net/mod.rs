//! The two-stream network: a shared multilayer-perceptron backbone feeding an
//! optional supervised head and one linear head per pseudo-labeling trial.
//!
//! The backbone exists once in memory; every head reads the same final hidden
//! representation, so a gradient from any head moves the shared trunk and that
//! head only.

mod io;
mod loss;
mod train;

pub use io::{load_model, save_model};
pub use loss::{
    joint_loss_grad, loss_joint, loss_manifold, loss_supervised, Heads, LabeledBatch, LossBreakdown,
    LossWeights, PseudoBatch, Reduction,
};
pub use train::{
    evaluate_streams, train, BalanceRecord, EpochRecord, LabeledStream, LambdaMode, PseudoStream,
    TrainConfig, TrainData, TrainOutcome,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub(crate) fn id(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub(crate) fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(format!("unknown activation `{other}` (expected relu or tanh)")),
        }
    }
}

/// Shapes of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Classes of the supervised head; 0 means no supervised head.
    pub n_classes: usize,
    /// Number of pseudo heads.
    pub n_trials: usize,
    /// Classes of every pseudo head.
    pub n_pseudo_classes: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("net.input_dim", "must be at least 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config("net.hidden_dims", "every width must be at least 1"));
        }
        if self.n_trials > 0 && self.n_pseudo_classes == 0 {
            return Err(Error::config("ems.z", "pseudo heads need at least one class"));
        }
        Ok(())
    }

    /// Width of the shared representation.
    pub fn representation_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// A fully connected layer, `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl Dense {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weights: Array2::zeros((out_dim, in_dim)),
            biases: Array1::zeros(out_dim),
        }
    }

    fn glorot(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            weights: Array2::from_shape_simple_fn((out_dim, in_dim), || rng.symmetric(limit)),
            biases: Array1::zeros(out_dim),
        }
    }

    fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights.t()) + &self.biases
    }

    fn squared_weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }
}

/// All trainable parameters. Also used as the container for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub backbone: Vec<Dense>,
    pub supervised_head: Option<Dense>,
    pub pseudo_heads: Vec<Dense>,
}

/// Scores produced for one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub supervised: Option<Array1<f64>>,
    /// `T x Z`
    pub pseudo: Array2<f64>,
}

/// Scores produced for a batch, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    pub representation: Array2<f64>,
    pub supervised: Option<Array2<f64>>,
    pub pseudo: Vec<Array2<f64>>,
}

/// Intermediate values of a backbone pass, kept for back-propagation.
pub(crate) struct BackboneCache {
    /// `inputs[l]` is the input of layer `l`; the last entry is the representation.
    pub(crate) activations: Vec<Array2<f64>>,
    pub(crate) pre_activations: Vec<Array2<f64>>,
}

impl BackboneCache {
    pub(crate) fn representation(&self) -> &Array2<f64> {
        self.activations.last().expect("input is always cached")
    }
}

impl NetworkParams {
    fn build(spec: &NetworkSpec, mut make: impl FnMut(usize, usize) -> Dense) -> Result<Self> {
        spec.validate()?;
        let mut backbone = Vec::with_capacity(spec.hidden_dims.len());
        let mut in_dim = spec.input_dim;
        for &h in &spec.hidden_dims {
            backbone.push(make(h, in_dim));
            in_dim = h;
        }
        let supervised_head = (spec.n_classes > 0).then(|| make(spec.n_classes, in_dim));
        let pseudo_heads = (0..spec.n_trials)
            .map(|_| make(spec.n_pseudo_classes, in_dim))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            backbone,
            supervised_head,
            pseudo_heads,
        })
    }

    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        Self::build(spec, Dense::zeros)
    }

    /// Glorot-uniform weights and zero biases, drawn in declaration order.
    pub fn init(spec: &NetworkSpec, rng: &mut Rng) -> Result<Self> {
        Self::build(spec, |o, i| Dense::glorot(o, i, rng))
    }

    /// Replaces every pseudo head with `n_trials` freshly initialized heads of
    /// `n_pseudo_classes` classes, keeping the backbone and supervised head.
    pub fn reset_pseudo_heads(&mut self, n_trials: usize, n_pseudo_classes: usize, rng: &mut Rng) {
        let h = self.spec.representation_dim();
        self.spec.n_trials = n_trials;
        self.spec.n_pseudo_classes = n_pseudo_classes;
        self.pseudo_heads = (0..n_trials).map(|_| Dense::glorot(n_pseudo_classes, h, rng)).collect();
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.spec).expect("spec already validated")
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone
            .iter()
            .chain(self.supervised_head.iter())
            .chain(self.pseudo_heads.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.backbone
            .iter_mut()
            .chain(self.supervised_head.iter_mut())
            .chain(self.pseudo_heads.iter_mut())
    }

    /// Every tensor in declaration order: per layer, weights then biases;
    /// backbone, then supervised head, then pseudo heads.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.biases.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.biases.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &NetworkParams) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            a.weights.scaled_add(alpha, &b.weights);
            a.biases.scaled_add(alpha, &b.biases);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn backbone_weight_norm(&self) -> f64 {
        self.backbone.iter().map(Dense::squared_weight_norm).sum()
    }

    fn check_input(&self, d: usize) -> Result<()> {
        if d != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                actual: d,
            });
        }
        Ok(())
    }

    pub(crate) fn backbone_forward(&self, x: ArrayView2<'_, f64>) -> Result<BackboneCache> {
        self.check_input(x.ncols())?;
        let act = self.spec.activation;
        let mut activations = vec![x.to_owned()];
        let mut pre_activations = Vec::with_capacity(self.backbone.len());
        for layer in &self.backbone {
            let z = layer.apply(activations.last().unwrap().view());
            activations.push(z.mapv(|v| act.apply(v)));
            pre_activations.push(z);
        }
        Ok(BackboneCache {
            activations,
            pre_activations,
        })
    }

    /// Back-propagates `d_rep` (gradient w.r.t. the representation) through the
    /// backbone, accumulating into `grad`.
    pub(crate) fn backbone_backward(&self, cache: &BackboneCache, mut d_rep: Array2<f64>, grad: &mut NetworkParams) {
        let act = self.spec.activation;
        for l in (0..self.backbone.len()).rev() {
            let z = &cache.pre_activations[l];
            let a = &cache.activations[l + 1];
            ndarray::Zip::from(&mut d_rep)
                .and(z)
                .and(a)
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            let input = &cache.activations[l];
            let g = &mut grad.backbone[l];
            g.weights += &d_rep.t().dot(input);
            g.biases += &d_rep.sum_axis(Axis(0));
            if l > 0 {
                d_rep = d_rep.dot(&self.backbone[l].weights);
            }
        }
    }

    /// Scores of every head for a batch.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<BatchScores> {
        let cache = self.backbone_forward(x)?;
        let rep = cache.activations.into_iter().last().unwrap();
        let supervised = self.supervised_head.as_ref().map(|h| h.apply(rep.view()));
        let pseudo = self.pseudo_heads.iter().map(|h| h.apply(rep.view())).collect();
        Ok(BatchScores {
            representation: rep,
            supervised,
            pseudo,
        })
    }

    /// Scores of every head for one input vector.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Scores> {
        let batch = self.forward_batch(x.insert_axis(Axis(0)))?;
        let t = self.spec.n_trials;
        let z = self.spec.n_pseudo_classes;
        let mut pseudo = Array2::zeros((t, z));
        for (i, head) in batch.pseudo.iter().enumerate() {
            pseudo.row_mut(i).assign(&head.row(0));
        }
        Ok(Scores {
            supervised: batch.supervised.map(|s| s.row(0).to_owned()),
            pseudo,
        })
    }

    /// The backbone's final hidden activation for a batch.
    pub fn embed_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.backbone_forward(x)?.activations.pop().unwrap())
    }

    pub fn embed(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.embed_batch(x.insert_axis(Axis(0)))?.row(0).to_owned())
    }

    /// Arg-max of the supervised head for every row of `x`.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        let scores = self
            .forward_batch(x)?
            .supervised
            .ok_or_else(|| Error::InvalidData("network has no supervised head".into()))?;
        Ok(scores
            .outer_iter()
            .map(|r| crate::ems::argmax(r.iter().copied()))
            .collect())
    }
}
