//! Supervised, manifold and joint objectives with analytic gradients.
//!
//! * supervised: cross-entropy of the supervised head plus `lambda_s` times the
//!   squared norm of the backbone and supervised-head weights,
//! * manifold: cross-entropy summed over pseudo heads plus `lambda_m` times the
//!   squared norm of the backbone weights (counted once) and of every active
//!   pseudo head's weights,
//! * joint: `supervised + lambda * manifold`.
//!
//! Biases are never penalized. A stream with no samples contributes nothing,
//! regularizer included.

use ndarray::{Array2, ArrayView2, Axis};

use super::NetworkParams;
use crate::ems::log_sum_exp;
use crate::error::{Error, Result};

/// How per-sample cross-entropies are combined within a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Divide the data term by the batch size (the regularizer is unchanged).
    Mean,
}

#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: &'a [usize],
}

/// Which pseudo heads a [`PseudoBatch`] drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heads {
    /// `labels` has one column per pseudo head.
    All,
    /// `labels` has a single column, the targets of this head.
    Only(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct PseudoBatch<'a> {
    pub x: ArrayView2<'a, f64>,
    /// `B x T` (or `B x 1` for [`Heads::Only`]).
    pub labels: ArrayView2<'a, usize>,
    pub heads: Heads,
}

impl LabeledBatch<'_> {
    fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

impl PseudoBatch<'_> {
    fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_m: f64,
    pub lambda: f64,
}

/// The two stream losses and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub manifold: f64,
    pub total: f64,
}

/// Cross-entropy of `logits` against `targets`; when `d_logits_scale` is
/// given, `logits` is overwritten with `scale * (softmax - onehot)`.
fn cross_entropy(logits: &mut Array2<f64>, targets: impl Iterator<Item = usize>, d_logits_scale: Option<f64>) -> f64 {
    let mut total = 0.0;
    for (mut row, y) in logits.axis_iter_mut(Axis(0)).zip(targets) {
        let lse = log_sum_exp(row.view());
        total += lse - row[y];
        if let Some(scale) = d_logits_scale {
            row.mapv_inplace(|s| (s - lse).exp() * scale);
            row[y] -= scale;
        }
    }
    total
}

fn data_scale(reduction: Reduction, batch: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch as f64,
    }
}

/// Supervised stream loss; gradients are added to `grad` scaled by `weight`.
pub(crate) fn supervised_stream(
    params: &NetworkParams,
    batch: LabeledBatch<'_>,
    lambda_s: f64,
    reduction: Reduction,
    grad: Option<(&mut NetworkParams, f64)>,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let head = params
        .supervised_head
        .as_ref()
        .ok_or_else(|| Error::InvalidData("labeled batch given to a network without a supervised head".into()))?;
    if batch.y.len() != batch.x.nrows() {
        return Err(Error::DimensionMismatch {
            expected: batch.x.nrows(),
            actual: batch.y.len(),
        });
    }
    let c = params.spec.n_classes;
    if let Some(&bad) = batch.y.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidData(format!("label {bad} is not below C = {c}")));
    }
    let scale = data_scale(reduction, batch.x.nrows());
    let cache = params.backbone_forward(batch.x)?;
    let rep = cache.representation();
    let mut logits = head.apply(rep.view());
    let reg = params.backbone_weight_norm() + head.squared_weight_norm();
    let grad_weight = grad.as_ref().map(|(_, w)| *w);
    let ce = cross_entropy(&mut logits, batch.y.iter().copied(), grad_weight.map(|w| w * scale));
    if let Some((g, w)) = grad {
        let gh = g.supervised_head.as_mut().expect("same spec");
        gh.weights += &logits.t().dot(rep);
        gh.biases += &logits.sum_axis(Axis(0));
        gh.weights.scaled_add(2.0 * lambda_s * w, &head.weights);
        let d_rep = logits.dot(&head.weights);
        params.backbone_backward(&cache, d_rep, g);
        add_backbone_decay(params, g, 2.0 * lambda_s * w);
    }
    Ok(scale * ce + lambda_s * reg)
}

/// Manifold stream loss; gradients are added to `grad` scaled by `weight`.
pub(crate) fn manifold_stream(
    params: &NetworkParams,
    batch: PseudoBatch<'_>,
    lambda_m: f64,
    reduction: Reduction,
    grad: Option<(&mut NetworkParams, f64)>,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let heads: Vec<usize> = match batch.heads {
        Heads::All => (0..params.spec.n_trials).collect(),
        Heads::Only(t) => vec![t],
    };
    if heads.iter().any(|&t| t >= params.pseudo_heads.len()) || heads.is_empty() {
        return Err(Error::InvalidData(format!(
            "pseudo batch targets heads {heads:?} but the network has {}",
            params.pseudo_heads.len()
        )));
    }
    if batch.labels.dim() != (batch.x.nrows(), heads.len()) {
        return Err(Error::InvalidData(format!(
            "pseudo labels have shape {:?}, expected {:?}",
            batch.labels.dim(),
            (batch.x.nrows(), heads.len())
        )));
    }
    let z = params.spec.n_pseudo_classes;
    if let Some(&bad) = batch.labels.iter().find(|&&v| v >= z) {
        return Err(Error::InvalidData(format!("pseudo label {bad} is not below Z = {z}")));
    }
    let scale = data_scale(reduction, batch.x.nrows());
    let cache = params.backbone_forward(batch.x)?;
    let rep = cache.representation();
    let grad_weight = grad.as_ref().map(|(_, w)| *w);
    let mut d_rep = grad_weight.map(|_| Array2::<f64>::zeros(rep.dim()));
    let mut ce = 0.0;
    let mut reg = params.backbone_weight_norm();
    let mut head_grads = Vec::new();
    for (col, &t) in heads.iter().enumerate() {
        let head = &params.pseudo_heads[t];
        reg += head.squared_weight_norm();
        let mut logits = head.apply(rep.view());
        ce += cross_entropy(
            &mut logits,
            batch.labels.column(col).iter().copied(),
            grad_weight.map(|w| w * scale),
        );
        if let Some(d_rep) = d_rep.as_mut() {
            *d_rep += &logits.dot(&head.weights);
            head_grads.push((t, logits));
        }
    }
    if let (Some((g, w)), Some(d_rep)) = (grad, d_rep) {
        for (t, d_logits) in head_grads {
            let gh = &mut g.pseudo_heads[t];
            gh.weights += &d_logits.t().dot(rep);
            gh.biases += &d_logits.sum_axis(Axis(0));
            gh.weights.scaled_add(2.0 * lambda_m * w, &params.pseudo_heads[t].weights);
        }
        params.backbone_backward(&cache, d_rep, g);
        add_backbone_decay(params, g, 2.0 * lambda_m * w);
    }
    Ok(scale * ce + lambda_m * reg)
}

fn add_backbone_decay(params: &NetworkParams, grad: &mut NetworkParams, coeff: f64) {
    for (g, p) in grad.backbone.iter_mut().zip(&params.backbone) {
        g.weights.scaled_add(coeff, &p.weights);
    }
}

/// Summed cross-entropy of the supervised head plus `lambda_s * ||theta_s||^2`.
pub fn loss_supervised(params: &NetworkParams, batch: LabeledBatch<'_>, lambda_s: f64) -> Result<f64> {
    supervised_stream(params, batch, lambda_s, Reduction::Sum, None)
}

/// Cross-entropy summed over pseudo heads and samples plus the manifold
/// regularizer.
pub fn loss_manifold(params: &NetworkParams, batch: PseudoBatch<'_>, lambda_m: f64) -> Result<f64> {
    manifold_stream(params, batch, lambda_m, Reduction::Sum, None)
}

/// `L_s + lambda * L_m`; a missing or empty stream contributes zero.
pub fn loss_joint(
    params: &NetworkParams,
    labeled: Option<LabeledBatch<'_>>,
    pseudo: Option<PseudoBatch<'_>>,
    weights: LossWeights,
) -> Result<f64> {
    let ls = match labeled {
        Some(b) => supervised_stream(params, b, weights.lambda_s, Reduction::Sum, None)?,
        None => 0.0,
    };
    let lm = match pseudo {
        Some(b) if weights.lambda != 0.0 => manifold_stream(params, b, weights.lambda_m, Reduction::Sum, None)?,
        _ => 0.0,
    };
    Ok(ls + weights.lambda * lm)
}

/// Joint loss and its gradient with respect to every parameter.
pub fn joint_loss_grad(
    params: &NetworkParams,
    labeled: Option<LabeledBatch<'_>>,
    pseudo: Option<PseudoBatch<'_>>,
    weights: LossWeights,
    reduction: Reduction,
) -> Result<(LossBreakdown, NetworkParams)> {
    let mut grad = params.zeros_like();
    let supervised = match labeled {
        Some(b) => supervised_stream(params, b, weights.lambda_s, reduction, Some((&mut grad, 1.0)))?,
        None => 0.0,
    };
    let manifold = match pseudo {
        Some(b) if weights.lambda != 0.0 => {
            manifold_stream(params, b, weights.lambda_m, reduction, Some((&mut grad, weights.lambda)))?
        }
        Some(b) => manifold_stream(params, b, weights.lambda_m, reduction, None)?,
        None => 0.0,
    };
    let total = supervised + weights.lambda * manifold;
    Ok((
        LossBreakdown {
            supervised,
            manifold,
            total,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, NetworkSpec};
    use crate::rng::Rng;
    use ndarray::{array, Array2};

    fn spec(c: usize, t: usize, z: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim: 3,
            hidden_dims: vec![4],
            activation: Activation::Tanh,
            n_classes: c,
            n_trials: t,
            n_pseudo_classes: z,
        }
    }

    #[test]
    fn zero_params_give_log_class_count() {
        let p = NetworkParams::zeros(&spec(4, 3, 5)).unwrap();
        let x = Array2::from_elem((7, 3), 0.3);
        let y = vec![0, 1, 2, 3, 0, 1, 2];
        let ls = loss_supervised(&p, LabeledBatch { x: x.view(), y: &y }, 0.1).unwrap();
        assert!((ls - 7.0 * 4f64.ln()).abs() < 1e-12);
        let labels = Array2::from_elem((7, 3), 1usize);
        let lm = loss_manifold(
            &p,
            PseudoBatch { x: x.view(), labels: labels.view(), heads: Heads::All },
            0.1,
        )
        .unwrap();
        assert!((lm - 7.0 * 3.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_minus_log_probability() {
        let mut logits = array![[1.0, 2.0, 0.5]];
        let ce = cross_entropy(&mut logits.clone(), [1].into_iter(), None);
        let p = 2f64.exp() / (1f64.exp() + 2f64.exp() + 0.5f64.exp());
        assert!((ce + p.ln()).abs() < 1e-14);
        // shift invariance
        logits += 1000.0;
        let shifted = cross_entropy(&mut logits, [1].into_iter(), None);
        assert!((shifted - ce).abs() < 1e-12);
    }

    #[test]
    fn single_trial_manifold_equals_supervised_with_z_classes() {
        let mut rng = Rng::new(5);
        let sup = NetworkParams::init(&spec(3, 0, 0), &mut rng).unwrap();
        let mut man = NetworkParams::zeros(&spec(0, 1, 3)).unwrap();
        man.backbone = sup.backbone.clone();
        man.pseudo_heads[0] = sup.supervised_head.clone().unwrap();
        let x = Array2::from_shape_simple_fn((5, 3), || rng.normal());
        let y = vec![0, 2, 1, 1, 0];
        let labels = Array2::from_shape_vec((5, 1), y.clone()).unwrap();
        let a = loss_supervised(&sup, LabeledBatch { x: x.view(), y: &y }, 0.01).unwrap();
        let b = loss_manifold(
            &man,
            PseudoBatch { x: x.view(), labels: labels.view(), heads: Heads::All },
            0.01,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn joint_structural_identities() {
        let mut rng = Rng::new(6);
        let p = NetworkParams::init(&spec(2, 2, 3), &mut rng).unwrap();
        let x = Array2::from_shape_simple_fn((4, 3), || rng.normal());
        let y = vec![0, 1, 1, 0];
        let labels = Array2::from_shape_simple_fn((4, 2), || (rng.uniform() * 3.0) as usize);
        let lb = LabeledBatch { x: x.view(), y: &y };
        let pb = PseudoBatch { x: x.view(), labels: labels.view(), heads: Heads::All };
        let w = LossWeights { lambda_s: 0.01, lambda_m: 0.02, lambda: 0.0 };
        assert_eq!(loss_joint(&p, Some(lb), Some(pb), w).unwrap(), loss_supervised(&p, lb, 0.01).unwrap());
        let empty_x = Array2::<f64>::zeros((0, 3));
        let empty = LabeledBatch { x: empty_x.view(), y: &[] };
        let w = LossWeights { lambda: 1.0, ..w };
        assert_eq!(loss_joint(&p, Some(empty), Some(pb), w).unwrap(), loss_manifold(&p, pb, 0.02).unwrap());
        let w = LossWeights { lambda: 0.3, ..w };
        let joint = loss_joint(&p, Some(empty), Some(pb), w).unwrap();
        assert_eq!(joint, 0.3 * loss_manifold(&p, pb, 0.02).unwrap());
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let p = NetworkParams::zeros(&spec(2, 1, 2)).unwrap();
        let x = Array2::zeros((1, 3));
        assert!(loss_supervised(&p, LabeledBatch { x: x.view(), y: &[2] }, 0.0).is_err());
        let labels = array![[2usize]];
        assert!(loss_manifold(&p, PseudoBatch { x: x.view(), labels: labels.view(), heads: Heads::All }, 0.0).is_err());
    }
}
