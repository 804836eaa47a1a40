//! SGD training loop: per-domain batches, weak/strong views, the combined
//! objective, momentum updates and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, Image, View};
use crate::dataset::{epoch_order, images_to_tensor, DatasetView};
use crate::error::{Error, Result};
use crate::losses::{
    onehot_tensor, total_loss, ConsistencyTarget, DomainViews, EnsembleMode, LossBreakdown,
    LossConfig, PseudoLabelSource, TargetViews,
};
use crate::model::{Arch, ModelParams};
use crate::rng::purpose;

/// Whether unlabeled target data participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uda,
    Dg,
}

/// Which augmentation feeds the prediction path (the target path is always
/// weak).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionPath {
    Strong,
    Weak,
}

/// Full hyper-parameter record for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    /// Iterations per epoch; `None` means one pass over the smallest
    /// source: `floor(min source size / per_domain_batch)`.
    pub iters_per_epoch: Option<usize>,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub per_domain_batch: usize,
    pub target_batch: usize,
    pub lambda_u: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub use_consistency: bool,
    pub ensemble_mode: EnsembleMode,
    pub consistency_target: ConsistencyTarget,
    pub pseudo_label_source: PseudoLabelSource,
    pub prediction_path: PredictionPath,
    pub augment_workers: usize,
    pub arch: Arch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Uda,
            epochs: 30,
            iters_per_epoch: None,
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            per_domain_batch: 16,
            target_batch: 16,
            lambda_u: 0.5,
            epsilon: 0.95,
            seed: 1,
            use_consistency: true,
            ensemble_mode: EnsembleMode::Collaborative,
            consistency_target: ConsistencyTarget::ExpertPrediction,
            pseudo_label_source: PseudoLabelSource::ConfidentExpert,
            prediction_path: PredictionPath::Strong,
            augment_workers: 1,
            arch: Arch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 < 0.0 {
            return Err(Error::contract(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs < 1 {
            return Err(Error::contract("epochs must be >= 1".to_string()));
        }
        if self.per_domain_batch == 0 || self.target_batch == 0 {
            return Err(Error::contract("batch sizes must be > 0".to_string()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::contract(format!(
                "epsilon must be in (0, 1], got {}",
                self.epsilon
            )));
        }
        if self.lambda_u < 0.0 {
            return Err(Error::contract("lambda_u must be >= 0".to_string()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_u: self.lambda_u,
            epsilon: self.epsilon,
            use_consistency: self.use_consistency,
            ensemble_mode: self.ensemble_mode,
            consistency_target: self.consistency_target,
            pseudo_label_source: self.pseudo_label_source,
        }
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * t / T))`, advanced per iteration.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    assert!(total >= 1 && t <= total);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// One velocity buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimState {
    velocity: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        OptimState {
            velocity: params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// Classic momentum update with weight decay folded into the gradient:
/// `g = grad + wd * p; v = m * v + g; p = p - lr * v`. Gradients are
/// consumed (zeroed) by the step.
pub fn sgd_momentum_step(
    params: &mut ModelParams<f32>,
    state: &mut OptimState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let lr = lr as f32;
    let momentum = momentum as f32;
    let wd = weight_decay as f32;
    for (idx, (tensor, vel)) in params
        .tensors_mut()
        .iter_mut()
        .zip(&mut state.velocity)
        .enumerate()
    {
        let grad = tensor.take_grad().ok_or_else(|| {
            Error::contract(format!("missing gradient for parameter tensor {idx}"))
        })?;
        tensor.update_values(|vals| {
            for ((p, v), &g) in vals.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                let g = g + wd * *p;
                *v = momentum * *v + g;
                *p -= lr * *v;
            }
        });
    }
    Ok(())
}

/// One epoch's aggregated measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_cr: f64,
    pub l_u: f64,
    pub total: f64,
    pub lr: f64,
    pub accepted_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

/// Per-epoch records of one run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    /// One JSON object per epoch, newline-delimited.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable record"))
            .fold(String::new(), |mut acc, line| {
                acc.push_str(&line);
                acc.push('\n');
                acc
            })
    }

    pub fn write_jsonl(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// Distinguishes prediction-path sample streams from target-path streams
/// when both use weak augmentation.
const PRED_PATH_BIT: u64 = 1 << 63;
/// Domain tag for the unlabeled target stream.
const TARGET_TAG: u64 = 0xff;

fn sample_index(domain_tag: u64, iter: usize, slot: usize) -> u64 {
    (domain_tag << 48) | ((iter as u64) << 24) | slot as u64
}

struct ViewBuilder {
    seed: u64,
    epoch: u64,
    workers: usize,
    prediction_path: PredictionPath,
}

impl ViewBuilder {
    /// Weak target-path view plus the prediction-path view, with one
    /// derived stream per sample.
    fn build(&self, images: &[&Image], domain_tag: u64, iter: usize) -> (Vec<Image>, Vec<Image>) {
        let weak_idx: Vec<u64> = (0..images.len())
            .map(|s| sample_index(domain_tag, iter, s))
            .collect();
        let pred_idx: Vec<u64> = weak_idx.iter().map(|i| i | PRED_PATH_BIT).collect();
        let weak = augment_batch(images, View::Weak, self.seed, self.epoch, &weak_idx, self.workers);
        let pred_view = match self.prediction_path {
            PredictionPath::Strong => View::Strong,
            PredictionPath::Weak => View::Weak,
        };
        let pred = augment_batch(images, pred_view, self.seed, self.epoch, &pred_idx, self.workers);
        (weak, pred)
    }
}

/// Trains a fresh model on K source domains, optionally consuming an
/// unlabeled target pool, and returns the final parameters with per-epoch
/// history. Deterministic given the config.
pub fn train(
    cfg: &TrainConfig,
    sources: &[DatasetView],
    target_unlabeled: Option<&DatasetView>,
    target_test: Option<&crate::dataset::DomainDataset>,
) -> Result<(ModelParams<f32>, RunHistory)> {
    cfg.validate()?;
    let k = sources.len();
    if k < 2 {
        return Err(Error::contract(format!("need at least 2 sources, got {k}")));
    }
    match (cfg.mode, target_unlabeled.is_some()) {
        (Mode::Uda, false) => {
            return Err(Error::contract(
                "UDA mode requires an unlabeled target pool".to_string(),
            ))
        }
        (Mode::Dg, true) => {
            return Err(Error::contract(
                "DG mode must not receive target data".to_string(),
            ))
        }
        _ => {}
    }
    let num_classes = sources[0].num_classes() as usize;
    if sources.iter().any(|s| s.num_classes() as usize != num_classes) {
        return Err(Error::contract("sources disagree on class count".to_string()));
    }
    let min_len = sources.iter().map(|s| s.len()).min().unwrap_or(0);
    if min_len < cfg.per_domain_batch {
        return Err(Error::contract(format!(
            "per_domain_batch {} exceeds smallest source size {min_len}",
            cfg.per_domain_batch
        )));
    }
    let iters_per_epoch = cfg
        .iters_per_epoch
        .unwrap_or(min_len / cfg.per_domain_batch)
        .max(1);
    let total_iters = cfg.epochs * iters_per_epoch;

    let mut params = ModelParams::init(cfg.arch, k, num_classes, cfg.seed)?;
    let mut optim = OptimState::new(&params);
    let loss_cfg = cfg.loss_config();
    let use_target = cfg.mode == Mode::Uda && cfg.lambda_u > 0.0;
    if use_target {
        let tlen = target_unlabeled.map(|t| t.len()).unwrap_or(0);
        if tlen < cfg.target_batch {
            return Err(Error::contract(format!(
                "target_batch {} exceeds target pool size {tlen}",
                cfg.target_batch
            )));
        }
    }

    let mut history = RunHistory::default();
    let mut t_global = 0usize;
    for epoch in 0..cfg.epochs {
        let builder = ViewBuilder {
            seed: cfg.seed,
            epoch: epoch as u64,
            workers: cfg.augment_workers.max(1),
            prediction_path: cfg.prediction_path,
        };
        let source_orders: Vec<Vec<u32>> = sources
            .iter()
            .enumerate()
            .map(|(d, s)| epoch_order(s.len(), cfg.seed, d as u64, epoch as u64, purpose::SHUFFLE))
            .collect();
        let target_order: Option<Vec<u32>> = if use_target {
            let t = target_unlabeled.expect("checked above");
            Some(epoch_order(
                t.len(),
                cfg.seed,
                TARGET_TAG,
                epoch as u64,
                purpose::TARGET_SHUFFLE,
            ))
        } else {
            None
        };

        let epoch_lr = cosine_lr(t_global, total_iters, cfg.lr0);
        let mut sums = LossBreakdown {
            l_ce: 0.0,
            l_cr: 0.0,
            l_u: 0.0,
            total: 0.0,
            accepted_fraction: 0.0,
        };

        for iter in 0..iters_per_epoch {
            let mut views = Vec::with_capacity(k);
            for (d, source) in sources.iter().enumerate() {
                let order = &source_orders[d];
                let base = iter * cfg.per_domain_batch;
                let idx: Vec<usize> = (0..cfg.per_domain_batch)
                    .map(|j| order[(base + j) % order.len()] as usize)
                    .collect();
                let images: Vec<&Image> = idx.iter().map(|&i| source.image(i)).collect();
                let labels: Vec<u16> = idx.iter().map(|&i| source.label(i)).collect();
                let (weak, pred) = builder.build(&images, d as u64, iter);
                let weak_refs: Vec<&Image> = weak.iter().collect();
                let pred_refs: Vec<&Image> = pred.iter().collect();
                views.push(DomainViews {
                    weak: images_to_tensor(&weak_refs),
                    strong: images_to_tensor(&pred_refs),
                    onehot: onehot_tensor(&labels, num_classes),
                });
            }
            let target_views = if use_target {
                let t = target_unlabeled.expect("checked above");
                let order = target_order.as_ref().expect("built above");
                let base = iter * cfg.target_batch;
                let idx: Vec<usize> = (0..cfg.target_batch)
                    .map(|j| order[(base + j) % order.len()] as usize)
                    .collect();
                let images: Vec<&Image> = idx.iter().map(|&i| t.image(i)).collect();
                let (weak, pred) = builder.build(&images, TARGET_TAG, iter);
                let weak_refs: Vec<&Image> = weak.iter().collect();
                let pred_refs: Vec<&Image> = pred.iter().collect();
                Some(TargetViews {
                    weak: images_to_tensor(&weak_refs),
                    strong: images_to_tensor(&pred_refs),
                })
            } else {
                None
            };

            let mut graph = crate::tensor::Graph::new();
            let (breakdown, loss) =
                total_loss(&mut graph, &params, &views, target_views.as_ref(), &loss_cfg)
                    .map_err(|e| at_epoch(e, epoch, iter))?;
            graph.backward(&loss).map_err(|e| at_epoch(e, epoch, iter))?;

            let lr = cosine_lr(t_global, total_iters, cfg.lr0);
            sgd_momentum_step(&mut params, &mut optim, lr, cfg.momentum, cfg.weight_decay)?;
            t_global += 1;

            sums.l_ce += breakdown.l_ce;
            sums.l_cr += breakdown.l_cr;
            sums.l_u += breakdown.l_u;
            sums.total += breakdown.total;
            sums.accepted_fraction += breakdown.accepted_fraction;
        }

        let n = iters_per_epoch as f64;
        let target_accuracy = match target_test {
            Some(test) => Some(crate::evalbench::evaluate(&params, test)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            l_ce: sums.l_ce / n,
            l_cr: sums.l_cr / n,
            l_u: sums.l_u / n,
            total: sums.total / n,
            lr: epoch_lr,
            accepted_fraction: sums.accepted_fraction / n,
            target_accuracy,
        });
    }

    Ok((params, history))
}

fn at_epoch(e: Error, epoch: usize, iter: usize) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("epoch {epoch}, iteration {iter}: {context}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, DomainDataset, SynthSpec};

    fn tiny_data() -> Vec<(DomainDataset, DomainDataset)> {
        generate_synthetic(&SynthSpec {
            num_classes: 3,
            image_side: 16,
            train_per_domain: 24,
            test_per_domain: 12,
            seed: 5,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            mode: Mode::Dg,
            epochs: 1,
            iters_per_epoch: Some(2),
            per_domain_batch: 4,
            target_batch: 4,
            arch: Arch {
                conv_channels: [4, 6, 8],
                feat_dim: 10,
                image_side: 16,
            },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.05), 0.05);
        assert!((cosine_lr(50, 100, 0.05) - 0.025).abs() < 1e-15);
        assert!(cosine_lr(100, 100, 0.05).abs() < 1e-12);
    }

    #[test]
    fn sgd_plain_step() {
        let mut params = ModelParams::<f32>::init(tiny_cfg().arch, 2, 3, 1).unwrap();
        let mut state = OptimState::new(&params);
        // grad 0.5 on every element of every tensor, momentum 0, wd 0
        let before = params.tensors()[0].values()[0];
        for t in params.tensors() {
            let mut g = crate::tensor::Graph::new();
            let sum = g.sum(t).unwrap();
            let half = g.scale(&sum, 0.5).unwrap();
            g.backward(&half).unwrap();
        }
        sgd_momentum_step(&mut params, &mut state, 0.1, 0.0, 0.0).unwrap();
        let after = params.tensors()[0].values()[0];
        assert!((after - (before - 0.05)).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_two_steps_displacement() {
        // constant grad 1: v1 = 1, v2 = 1.9; total displacement lr * 2.9
        let arch = tiny_cfg().arch;
        let mut params = ModelParams::<f32>::init(arch, 2, 3, 1).unwrap();
        let mut state = OptimState::new(&params);
        let start = params.tensors()[1].values().to_vec();
        for _ in 0..2 {
            for t in params.tensors() {
                let mut g = crate::tensor::Graph::new();
                let sum = g.sum(t).unwrap();
                g.backward(&sum).unwrap(); // grad = 1 everywhere
            }
            // weight decay off so the gradient stays exactly 1
            sgd_momentum_step(&mut params, &mut state, 0.01, 0.9, 0.0).unwrap();
        }
        let end = params.tensors()[1].values().to_vec();
        for (s, e) in start.iter().zip(&end) {
            assert!(((s - e) - 0.01 * 2.9).abs() < 1e-6, "{s} -> {e}");
        }
    }

    #[test]
    fn sgd_zero_grad_zero_velocity_is_fixed_point() {
        let mut params = ModelParams::<f32>::init(tiny_cfg().arch, 2, 3, 1).unwrap();
        let mut state = OptimState::new(&params);
        let before: Vec<Vec<u32>> = params
            .tensors()
            .iter()
            .map(|t| t.values().iter().map(|v| v.to_bits()).collect())
            .collect();
        for t in params.tensors() {
            let mut g = crate::tensor::Graph::new();
            let sum = g.sum(t).unwrap();
            let zero = g.scale(&sum, 0.0).unwrap();
            g.backward(&zero).unwrap();
        }
        sgd_momentum_step(&mut params, &mut state, 0.1, 0.0, 0.0).unwrap();
        let after: Vec<Vec<u32>> = params
            .tensors()
            .iter()
            .map(|t| t.values().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn sgd_missing_grad_is_contract_error() {
        let mut params = ModelParams::<f32>::init(tiny_cfg().arch, 2, 3, 1).unwrap();
        let mut state = OptimState::new(&params);
        assert!(sgd_momentum_step(&mut params, &mut state, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn zero_lr_leaves_params_at_init() {
        let data = tiny_data();
        let views: Vec<DatasetView> =
            data.iter().take(3).map(|(t, _)| DatasetView::plain(t)).collect();
        let cfg = TrainConfig {
            lr0: 0.0,
            weight_decay: 0.0,
            ..tiny_cfg()
        };
        let (params, _) = train(&cfg, &views, None, None).unwrap();
        let init = ModelParams::<f32>::init(cfg.arch, 3, 3, cfg.seed).unwrap();
        for (a, b) in params.tensors().iter().zip(init.tensors()) {
            let bits = |t: &crate::tensor::Tensor<f32>| {
                t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn same_seed_same_final_params() {
        let data = tiny_data();
        let views: Vec<DatasetView> =
            data.iter().take(3).map(|(t, _)| DatasetView::plain(t)).collect();
        let cfg = tiny_cfg();
        let (p1, h1) = train(&cfg, &views, None, None).unwrap();
        let (p2, h2) = train(&cfg, &views, None, None).unwrap();
        for (a, b) in p1.tensors().iter().zip(p2.tensors()) {
            let bits = |t: &crate::tensor::Tensor<f32>| {
                t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(h1.to_jsonl(), h2.to_jsonl());
    }

    #[test]
    fn dg_equals_uda_with_lambda_zero() {
        let data = tiny_data();
        let sources: Vec<DatasetView> =
            data.iter().take(3).map(|(t, _)| DatasetView::plain(t)).collect();
        let target = DatasetView::plain(&data[3].0);
        let dg_cfg = tiny_cfg();
        let uda_cfg = TrainConfig {
            mode: Mode::Uda,
            lambda_u: 0.0,
            ..tiny_cfg()
        };
        let (p_dg, h_dg) = train(&dg_cfg, &sources, None, None).unwrap();
        let (p_uda, h_uda) = train(&uda_cfg, &sources, Some(&target), None).unwrap();
        for (a, b) in p_dg.tensors().iter().zip(p_uda.tensors()) {
            let bits = |t: &crate::tensor::Tensor<f32>| {
                t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(h_dg.to_jsonl(), h_uda.to_jsonl());
    }

    #[test]
    fn mode_dataset_consistency_is_enforced() {
        let data = tiny_data();
        let sources: Vec<DatasetView> =
            data.iter().take(3).map(|(t, _)| DatasetView::plain(t)).collect();
        let target = DatasetView::plain(&data[3].0);
        let uda = TrainConfig {
            mode: Mode::Uda,
            ..tiny_cfg()
        };
        assert!(train(&uda, &sources, None, None).is_err());
        let dg = tiny_cfg();
        assert!(train(&dg, &sources, Some(&target), None).is_err());
    }

    #[test]
    fn history_has_one_record_per_epoch_and_serializes() {
        let data = tiny_data();
        let views: Vec<DatasetView> =
            data.iter().take(3).map(|(t, _)| DatasetView::plain(t)).collect();
        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_cfg()
        };
        let (_, history) = train(&cfg, &views, None, Some(&data[3].1)).unwrap();
        assert_eq!(history.epochs.len(), 3);
        let jsonl = history.to_jsonl();
        assert_eq!(jsonl.lines().count(), 3);
        for line in jsonl.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("l_ce").is_some());
            assert!(v.get("target_accuracy").is_some());
        }
    }
}
