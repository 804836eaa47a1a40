//! The training objective: per-domain expert cross-entropy, consistency
//! between a (pseudo-)target-domain expert and the ensemble of the other
//! heads, and a confidence-gated pseudo-label loss on unlabeled target
//! batches. The total is `L_ce + L_cr + lambda_u * L_u`; the unlabeled term
//! disappears when no target data is given.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{stop_gradient, Graph, Scalar, Tensor};

/// How ensemble members are supervised: through their mean (gradients mix
/// information across experts) or each member individually.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    Collaborative,
    Individual,
}

/// Target of the consistency term: the domain expert's own prediction or
/// the real one-hot label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyTarget {
    ExpertPrediction,
    RealLabel,
}

/// Pseudo-label source for unlabeled batches: the single most confident
/// expert or the expert mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelSource {
    ConfidentExpert,
    Ensemble,
}

/// Loss-shape knobs shared by the trainer and the benchmark harness.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lambda_u: f64,
    pub epsilon: f64,
    pub use_consistency: bool,
    pub ensemble_mode: EnsembleMode,
    pub consistency_target: ConsistencyTarget,
    pub pseudo_label_source: PseudoLabelSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_u: 0.5,
            epsilon: 0.95,
            use_consistency: true,
            ensemble_mode: EnsembleMode::Collaborative,
            consistency_target: ConsistencyTarget::ExpertPrediction,
            pseudo_label_source: PseudoLabelSource::ConfidentExpert,
        }
    }
}

/// Weak and prediction-path views of one labeled source batch.
#[derive(Debug, Clone)]
pub struct DomainViews<S: Scalar> {
    /// Weak view `[B, 3, H, W]`: feeds expert learning and the
    /// consistency target.
    pub weak: Tensor<S>,
    /// Prediction-path view (strong by default): feeds the non-expert
    /// ensemble.
    pub strong: Tensor<S>,
    /// `[B, C]` one-hot labels.
    pub onehot: Tensor<S>,
}

/// Weak and prediction-path views of one unlabeled target batch.
#[derive(Debug, Clone)]
pub struct TargetViews<S: Scalar> {
    pub weak: Tensor<S>,
    pub strong: Tensor<S>,
}

/// One-hot rows for a label list.
pub fn onehot_tensor<S: Scalar>(labels: &[u16], num_classes: usize) -> Tensor<S> {
    let mut vals = vec![S::ZERO; labels.len() * num_classes];
    for (row, &label) in labels.iter().enumerate() {
        vals[row * num_classes + label as usize] = S::ONE;
    }
    Tensor::from_vec(vec![labels.len(), num_classes], vals)
}

/// Per-sample pseudo labels for an unlabeled batch, detached from any graph.
#[derive(Debug, Clone)]
pub struct PseudoLabels<S: Scalar> {
    /// `[B, C]` one-hot guesses.
    pub onehot: Tensor<S>,
    /// Whether the guess cleared the confidence threshold.
    pub mask: Vec<bool>,
    /// Max class probability of the chosen source distribution.
    pub confidence: Vec<f64>,
    /// Index of the most confident expert per sample.
    pub chosen_expert: Vec<usize>,
}

impl<S: Scalar> PseudoLabels<S> {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn accepted_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }
}

/// Mean over the full batch of `-sum_c target * log(clamp(pred, 1e-12))`.
///
/// Masked-out samples contribute zero to the numerator but still count in
/// the batch-size denominator.
pub fn cross_entropy<S: Scalar>(
    g: &mut Graph<S>,
    pred: &Tensor<S>,
    target_onehot: &Tensor<S>,
    mask: Option<&[bool]>,
) -> Result<Tensor<S>> {
    if pred.shape() != target_onehot.shape() || pred.shape().len() != 2 {
        return Err(Error::shape(
            "cross_entropy",
            format!("{:?} vs {:?}", pred.shape(), target_onehot.shape()),
        ));
    }
    let batch = pred.shape()[0];
    if let Some(m) = mask {
        if m.len() != batch {
            return Err(Error::shape(
                "cross_entropy",
                format!("mask length {} vs batch {batch}", m.len()),
            ));
        }
    }
    let cols = pred.shape()[1];
    let weights = match mask {
        None => target_onehot.clone(),
        Some(m) => {
            let mut vals = target_onehot.values().to_vec();
            for (row, &keep) in m.iter().enumerate() {
                if !keep {
                    vals[row * cols..(row + 1) * cols].fill(S::ZERO);
                }
            }
            Tensor::from_vec(pred.shape().to_vec(), vals)
        }
    };
    let lp = g.log(pred)?;
    let picked = g.mul(&lp, &weights)?;
    let total = g.sum(&picked)?;
    g.scale(&total, -1.0 / batch as f64)
}

/// Expert probabilities on each domain's weak view, one backbone pass per
/// domain, gradients flowing.
fn weak_expert_probs<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    sources: &[DomainViews<S>],
) -> Result<Vec<Tensor<S>>> {
    sources
        .iter()
        .enumerate()
        .map(|(i, views)| params.expert_forward(g, i, &views.weak))
        .collect()
}

fn check_k<S: Scalar>(params: &ModelParams<S>, sources: &[DomainViews<S>]) -> Result<()> {
    if sources.len() != params.num_experts {
        return Err(Error::contract(format!(
            "{} source batches for K={} experts",
            sources.len(),
            params.num_experts
        )));
    }
    Ok(())
}

/// `(1/K) sum_i H(y_i, E_i(weak_i))`: each expert fits its own domain, so
/// gradients reach head i only through its own term.
pub fn expert_ce_loss<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    sources: &[DomainViews<S>],
) -> Result<Tensor<S>> {
    check_k(params, sources)?;
    let probs = weak_expert_probs(g, params, sources)?;
    expert_ce_from_probs(g, sources, &probs)
}

fn expert_ce_from_probs<S: Scalar>(
    g: &mut Graph<S>,
    sources: &[DomainViews<S>],
    weak_probs: &[Tensor<S>],
) -> Result<Tensor<S>> {
    let mut acc: Option<Tensor<S>> = None;
    for (views, probs) in sources.iter().zip(weak_probs) {
        let ce = cross_entropy(g, probs, &views.onehot, None)?;
        acc = Some(match acc {
            None => ce,
            Some(prev) => g.add(&prev, &ce)?,
        });
    }
    g.scale(&acc.expect("at least one source"), 1.0 / sources.len() as f64)
}

/// Consistency between the domain expert's weakly augmented prediction (or
/// the real label) and the non-expert outputs on the strongly augmented
/// view. The target path is detached: gradients flow only through the
/// prediction path.
pub fn consistency_loss<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    sources: &[DomainViews<S>],
    mode: EnsembleMode,
    target: ConsistencyTarget,
) -> Result<Tensor<S>> {
    check_k(params, sources)?;
    let weak_probs = match target {
        // Target values only; no gradient is needed on this path.
        ConsistencyTarget::ExpertPrediction => {
            g.with_no_grad(|g| weak_expert_probs(g, params, sources))?
        }
        ConsistencyTarget::RealLabel => Vec::new(),
    };
    consistency_from_probs(g, params, sources, &weak_probs, mode, target)
}

fn consistency_from_probs<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    sources: &[DomainViews<S>],
    weak_probs: &[Tensor<S>],
    mode: EnsembleMode,
    target: ConsistencyTarget,
) -> Result<Tensor<S>> {
    let k = params.num_experts;
    if k < 2 {
        return Err(Error::contract(
            "consistency needs K >= 2 (no non-expert ensemble exists)".to_string(),
        ));
    }
    let mut acc: Option<Tensor<S>> = None;
    for (i, views) in sources.iter().enumerate() {
        let target_probs = match target {
            ConsistencyTarget::ExpertPrediction => stop_gradient(&weak_probs[i]),
            ConsistencyTarget::RealLabel => views.onehot.clone(),
        };
        let feat = params.backbone(g, &views.strong)?;
        let non_experts: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        let term = match mode {
            EnsembleMode::Collaborative => {
                let mean = params.ensemble_from_features(g, &feat, &non_experts)?;
                let diff = g.sub(&target_probs, &mean)?;
                let sq = g.sq_l2_rowwise(&diff)?;
                g.mean(&sq)?
            }
            EnsembleMode::Individual => {
                let mut sum: Option<Tensor<S>> = None;
                for &j in &non_experts {
                    let probs = params.head_probs(g, j, &feat)?;
                    let diff = g.sub(&target_probs, &probs)?;
                    let sq = g.sq_l2_rowwise(&diff)?;
                    let m = g.mean(&sq)?;
                    sum = Some(match sum {
                        None => m,
                        Some(prev) => g.add(&prev, &m)?,
                    });
                }
                g.scale(&sum.expect("k >= 2"), 1.0 / (k - 1) as f64)?
            }
        };
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(&prev, &term)?,
        });
    }
    g.scale(&acc.expect("k >= 2"), 1.0 / k as f64)
}

/// Pure pseudo-label rule over per-expert probability rows; the oracle-
/// checkable core of [`make_pseudo_labels`]. `probs[i]` holds expert i's
/// `[B, C]` probabilities. Ties break toward the lowest expert and class
/// index.
pub fn pseudo_labels_from_probs<S: Scalar>(
    probs: &[Vec<S>],
    batch: usize,
    num_classes: usize,
    epsilon: f64,
    source: PseudoLabelSource,
) -> Result<PseudoLabels<S>> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::contract(format!(
            "confidence threshold must be in (0, 1], got {epsilon}"
        )));
    }
    let k = probs.len();
    let mut onehot = vec![S::ZERO; batch * num_classes];
    let mut mask = Vec::with_capacity(batch);
    let mut confidence = Vec::with_capacity(batch);
    let mut chosen_expert = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = |i: usize| &probs[i][b * num_classes..(b + 1) * num_classes];
        // Most confident expert, ties toward the lowest index.
        let mut best_i = 0;
        let mut best_conf = f64::NEG_INFINITY;
        for i in 0..k {
            let m = row(i)
                .iter()
                .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v.to_f64()));
            if m > best_conf {
                best_conf = m;
                best_i = i;
            }
        }
        let dist: Vec<f64> = match source {
            PseudoLabelSource::ConfidentExpert => row(best_i).iter().map(|v| v.to_f64()).collect(),
            PseudoLabelSource::Ensemble => {
                let mut mean = vec![0.0; num_classes];
                for i in 0..k {
                    for (m, &v) in mean.iter_mut().zip(row(i)) {
                        *m += v.to_f64();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= k as f64);
                mean
            }
        };
        let mut class = 0;
        for (c, &v) in dist.iter().enumerate().skip(1) {
            if v > dist[class] {
                class = c;
            }
        }
        let conf = dist[class];
        onehot[b * num_classes + class] = S::ONE;
        mask.push(conf >= epsilon);
        confidence.push(conf);
        chosen_expert.push(best_i);
    }
    Ok(PseudoLabels {
        onehot: Tensor::from_vec(vec![batch, num_classes], onehot),
        mask,
        confidence,
        chosen_expert,
    })
}

/// Guesses one-hot labels for a weakly augmented unlabeled batch from the
/// most confident expert (or the expert mean), gating each sample on the
/// confidence threshold. All outputs are detached.
pub fn make_pseudo_labels<S: Scalar>(
    params: &ModelParams<S>,
    weak_target: &Tensor<S>,
    epsilon: f64,
    source: PseudoLabelSource,
) -> Result<PseudoLabels<S>> {
    let batch = weak_target.shape()[0];
    let mut g = Graph::new();
    let probs: Vec<Vec<S>> = g.with_no_grad(|g| -> Result<_> {
        let feat = params.backbone(g, weak_target)?;
        (0..params.num_experts)
            .map(|i| Ok(params.head_probs(g, i, &feat)?.values().to_vec()))
            .collect()
    })?;
    pseudo_labels_from_probs(&probs, batch, params.num_classes, epsilon, source)
}

/// Cross-entropy of the full-expert prediction on the strong target view
/// against accepted pseudo labels (full-batch denominator).
pub fn unlabeled_loss<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    strong_target: &Tensor<S>,
    pl: &PseudoLabels<S>,
    mode: EnsembleMode,
) -> Result<Tensor<S>> {
    if strong_target.shape()[0] != pl.len() {
        return Err(Error::shape(
            "unlabeled_loss",
            format!(
                "strong view batch {} vs {} pseudo labels",
                strong_target.shape()[0],
                pl.len()
            ),
        ));
    }
    let all: Vec<usize> = (0..params.num_experts).collect();
    let feat = params.backbone(g, strong_target)?;
    match mode {
        EnsembleMode::Collaborative => {
            let ens = params.ensemble_from_features(g, &feat, &all)?;
            cross_entropy(g, &ens, &pl.onehot, Some(&pl.mask))
        }
        EnsembleMode::Individual => {
            let mut acc: Option<Tensor<S>> = None;
            for &i in &all {
                let probs = params.head_probs(g, i, &feat)?;
                let ce = cross_entropy(g, &probs, &pl.onehot, Some(&pl.mask))?;
                acc = Some(match acc {
                    None => ce,
                    Some(prev) => g.add(&prev, &ce)?,
                });
            }
            g.scale(&acc.expect("K >= 1"), 1.0 / params.num_experts as f64)
        }
    }
}

/// Scalar readouts of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_cr: f64,
    pub l_u: f64,
    pub total: f64,
    /// Fraction of unlabeled samples that cleared the threshold; 0 when no
    /// unlabeled term was computed.
    pub accepted_fraction: f64,
}

/// Builds the full objective on `g` and returns the readouts plus the total
/// tensor to run backward on.
///
/// Weak views feed expert learning and both target paths; prediction-path
/// views feed the non-expert ensemble and the pseudo-label consumer, one
/// forward pass per view. `lambda_u = 0` (or an absent target) removes the
/// unlabeled term entirely, which is exact: a zero-weighted term
/// contributes zero gradient.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    params: &ModelParams<S>,
    sources: &[DomainViews<S>],
    target: Option<&TargetViews<S>>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor<S>)> {
    check_k(params, sources)?;
    let weak_probs = weak_expert_probs(g, params, sources)?;
    let l_ce = expert_ce_from_probs(g, sources, &weak_probs)?;
    let mut total = l_ce.clone();

    let mut l_cr_val = 0.0;
    if cfg.use_consistency {
        // Reuse the expert-learning forward values as the detached targets.
        let detached: Vec<Tensor<S>> = weak_probs.iter().map(stop_gradient).collect();
        let l_cr = consistency_from_probs(
            g,
            params,
            sources,
            &detached,
            cfg.ensemble_mode,
            cfg.consistency_target,
        )?;
        l_cr_val = l_cr.item().to_f64();
        total = g.add(&total, &l_cr)?;
    }

    let mut l_u_val = 0.0;
    let mut accepted = 0.0;
    if let Some(tv) = target {
        if cfg.lambda_u > 0.0 {
            let pl = make_pseudo_labels(params, &tv.weak, cfg.epsilon, cfg.pseudo_label_source)?;
            let l_u = unlabeled_loss(g, params, &tv.strong, &pl, cfg.ensemble_mode)?;
            l_u_val = l_u.item().to_f64();
            accepted = pl.accepted_fraction();
            let weighted = g.scale(&l_u, cfg.lambda_u)?;
            total = g.add(&total, &weighted)?;
        }
    }

    let breakdown = LossBreakdown {
        l_ce: l_ce.item().to_f64(),
        l_cr: l_cr_val,
        l_u: l_u_val,
        total: total.item().to_f64(),
        accepted_fraction: accepted,
    };
    Ok((breakdown, total))
}

/// Closed-form gradient of the two ensemble objectives with respect to one
/// member's probability vector: for `||mean_j(p_j) - target||^2` the
/// collaborative form is `(2/K) (mean_j(p_j) - target)`; for
/// `(1/K) sum_j ||p_j - target||^2` the individual form is
/// `(2/K) (p_i - target)`. Serves as the oracle for the autodiff path.
pub fn analytic_grad(probs: &[Vec<f64>], target: &[f64], i: usize, mode: EnsembleMode) -> Vec<f64> {
    let k = probs.len() as f64;
    match mode {
        EnsembleMode::Collaborative => {
            let mut mean = vec![0.0; target.len()];
            for p in probs {
                for (m, &v) in mean.iter_mut().zip(p) {
                    *m += v;
                }
            }
            mean.iter()
                .zip(target)
                .map(|(&m, &t)| (2.0 / k) * (m / k - t))
                .collect()
        }
        EnsembleMode::Individual => probs[i]
            .iter()
            .zip(target)
            .map(|(&p, &t)| (2.0 / k) * (p - t))
            .collect(),
    }
}
