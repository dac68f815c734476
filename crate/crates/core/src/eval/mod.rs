//! Fall and mask metrics, baselines, occlusion maps and the held-out-size
//! transfer protocol.

pub mod metrics;
pub mod occlusion;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{
    binomial_ci, class_constant_baseline, log_likelihood_per_pixel, mask_at_t0_baseline, mean_mask_iou, pearson,
    roc_curve, Confusion, Roc,
};
pub use occlusion::{occlusion_heatmap, Heatmap};

use crate::learn::net::MiniPhysNet;
use crate::learn::train::train_mini;
use crate::learn::{knn_predict, LearnError, LossConfig, Model, NetConfig, TrainConfig, TrainSample};
use crate::render::NUM_CLASSES;

/// Index of the t = 4 s mask among the predicted steps.
pub const FINAL_MASK: usize = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask {0} has no foreground class")]
    EmptyForeground(usize),
    #[error("need at least one positive and one negative label")]
    DegenerateLabels,
    #[error("input is constant")]
    ConstantInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub n_blocks: usize,
    pub count: usize,
    pub accuracy: f64,
    pub accuracy_ci: f64,
    pub miou: Option<f64>,
    pub ll_per_px: Option<f64>,
    pub held_out: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnFeatures {
    Raw,
    Trunk,
}

impl std::str::FromStr for KnnFeatures {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(KnnFeatures::Raw),
            "trunk" => Ok(KnnFeatures::Trunk),
            other => Err(EvalError::InvalidInput(format!("unknown knn features {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnReport {
    pub features: KnnFeatures,
    pub k: usize,
    pub accuracy: f64,
    pub accuracy_ci: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_kind: String,
    pub count: usize,
    pub fall_accuracy: f64,
    pub accuracy_ci: f64,
    pub per_size: Vec<SizeReport>,
    /// Over examples with masks whose final mask has foreground.
    pub miou: Option<f64>,
    pub ll_per_px: Option<f64>,
    /// Masked examples left out of MIoU because nothing is left in frame.
    pub miou_excluded: usize,
    /// Absent when the test labels are all one class.
    pub roc: Option<Roc>,
    pub confusion: Confusion,
    pub knn: Option<KnnReport>,
}

/// Per-example scores gathered before aggregation.
struct Scored {
    n_blocks: usize,
    fell: bool,
    prob: f64,
    iou: Option<f64>,
    ll: Option<f64>,
}

fn score(model: &dyn Model<f32>, s: &TrainSample) -> Result<Scored, EvalError> {
    let (prob, iou, ll) = match &s.masks {
        Some(masks) => {
            let pred = model.forward_one(&s.image);
            let label: &[u8] = &masks[FINAL_MASK];
            let q: &[f32] = &pred.masks[FINAL_MASK];
            let iou = match mean_mask_iou(&[label], &[q], NUM_CLASSES) {
                Ok(v) => Some(v),
                Err(EvalError::EmptyForeground(_)) => None,
                Err(e) => return Err(e),
            };
            let ll = log_likelihood_per_pixel(&[label], &[q], NUM_CLASSES)?;
            (pred.fall_prob as f64, iou, Some(ll))
        }
        None => (model.fall_prob(&s.image) as f64, None, None),
    };
    Ok(Scored {
        n_blocks: s.n_blocks,
        fell: s.fell,
        prob,
        iou,
        ll,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn size_reports(scored: &[Scored], held_out: &[usize]) -> Vec<SizeReport> {
    let mut sizes: Vec<usize> = scored.iter().map(|s| s.n_blocks).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|n| {
            let sub: Vec<&Scored> = scored.iter().filter(|s| s.n_blocks == n).collect();
            let correct = sub.iter().filter(|s| (s.prob > 0.5) == s.fell).count();
            let accuracy = correct as f64 / sub.len() as f64;
            SizeReport {
                n_blocks: n,
                count: sub.len(),
                accuracy,
                accuracy_ci: binomial_ci(accuracy, sub.len()),
                miou: mean(sub.iter().filter_map(|s| s.iou)),
                ll_per_px: mean(sub.iter().filter_map(|s| s.ll)),
                held_out: held_out.contains(&n),
            }
        })
        .collect()
}

/// Scores fall predictions and final-mask predictions on `test`.
pub fn evaluate(model: &dyn Model<f32>, test: &[TrainSample]) -> Result<EvalReport, EvalError> {
    evaluate_with_held_out(model, test, &[])
}

pub fn evaluate_with_held_out(
    model: &dyn Model<f32>,
    test: &[TrainSample],
    held_out: &[usize],
) -> Result<EvalReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::InvalidInput("empty test set".into()));
    }
    let expected = model.input_len();
    if let Some(s) = test.iter().find(|s| s.image.len() != expected) {
        return Err(EvalError::LengthMismatch(expected, s.image.len()));
    }
    let scored = test.par_iter().map(|s| score(model, s)).collect::<Result<Vec<_>, _>>()?;
    let predicted: Vec<bool> = scored.iter().map(|s| s.prob > 0.5).collect();
    let fell: Vec<bool> = scored.iter().map(|s| s.fell).collect();
    let confusion = Confusion::from_predictions(&predicted, &fell);
    let probs: Vec<f64> = scored.iter().map(|s| s.prob).collect();
    let roc = match roc_curve(&probs, &fell) {
        Ok(r) => Some(r),
        Err(EvalError::DegenerateLabels) => None,
        Err(e) => return Err(e),
    };
    let accuracy = confusion.accuracy();
    Ok(EvalReport {
        model_kind: model.kind().as_str().to_string(),
        count: test.len(),
        fall_accuracy: accuracy,
        accuracy_ci: binomial_ci(accuracy, test.len()),
        per_size: size_reports(&scored, held_out),
        miou: mean(scored.iter().filter_map(|s| s.iou)),
        ll_per_px: mean(scored.iter().filter_map(|s| s.ll)),
        miou_excluded: scored.iter().filter(|s| s.ll.is_some() && s.iou.is_none()).count(),
        roc,
        confusion,
        knn: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskBaselines {
    /// Class frequencies of the scored labels.
    pub class_constant: Vec<f64>,
    pub class_constant_ll_per_px: f64,
    pub class_constant_miou: f64,
    pub mask_t0_ll_per_px: f64,
    pub mask_t0_miou: f64,
    pub count: usize,
}

/// Class-constant and Mask@t=0 predictions of the final mask.
pub fn mask_baselines(test: &[TrainSample]) -> Result<MaskBaselines, EvalError> {
    let masked: Vec<&[Vec<u8>; 4]> = test
        .iter()
        .filter_map(|s| s.masks.as_ref())
        .filter(|m| m[FINAL_MASK].iter().any(|&c| c != 0))
        .collect();
    if masked.is_empty() {
        return Err(EvalError::InvalidInput("no masked examples".into()));
    }
    let labels: Vec<&[u8]> = masked.iter().map(|m| m[FINAL_MASK].as_slice()).collect();
    let dist = class_constant_baseline(&labels, NUM_CLASSES)?;
    let pixels = labels[0].len();
    let constant = metrics::broadcast_distribution(&dist, pixels);
    let constant_refs: Vec<&[f32]> = labels.iter().map(|_| constant.as_slice()).collect();
    let t0: Vec<Vec<f32>> = masked.iter().map(|m| mask_at_t0_baseline(&m[0], NUM_CLASSES)).collect();
    let t0_refs: Vec<&[f32]> = t0.iter().map(Vec::as_slice).collect();
    Ok(MaskBaselines {
        class_constant_ll_per_px: log_likelihood_per_pixel(&labels, &constant_refs, NUM_CLASSES)?,
        class_constant_miou: mean_mask_iou(&labels, &constant_refs, NUM_CLASSES)?,
        mask_t0_ll_per_px: log_likelihood_per_pixel(&labels, &t0_refs, NUM_CLASSES)?,
        mask_t0_miou: mean_mask_iou(&labels, &t0_refs, NUM_CLASSES)?,
        class_constant: dist,
        count: labels.len(),
    })
}

/// k-nearest-neighbour fall prediction on raw pixels or pooled trunk features.
pub fn knn_report(
    train: &[TrainSample],
    test: &[TrainSample],
    k: usize,
    features: KnnFeatures,
    trunk: Option<&MiniPhysNet<f32>>,
) -> Result<KnnReport, EvalError> {
    let extract = |s: &TrainSample| -> Result<Vec<f32>, EvalError> {
        match (features, trunk) {
            (KnnFeatures::Raw, _) => Ok(s.image.clone()),
            (KnnFeatures::Trunk, Some(net)) => Ok(net.features(&s.image)),
            (KnnFeatures::Trunk, None) => Err(EvalError::InvalidInput("trunk features need a mini network".into())),
        }
    };
    let train_f = train.par_iter().map(extract).collect::<Result<Vec<_>, _>>()?;
    let test_f = test.par_iter().map(extract).collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<bool> = train.iter().map(|s| s.fell).collect();
    let probs = knn_predict(&train_f, &labels, &test_f, k)?;
    let correct = probs.iter().zip(test).filter(|(p, s)| (**p > 0.5) == s.fell).count();
    let accuracy = correct as f64 / test.len().max(1) as f64;
    Ok(KnnReport {
        features,
        k,
        accuracy,
        accuracy_ci: binomial_ci(accuracy, test.len()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub train_sizes: Vec<usize>,
    pub train_count: usize,
    pub best_lr: f64,
    pub best_epoch: usize,
    pub report: EvalReport,
}

/// Trains on towers whose size is in `train_sizes` and scores every size
/// in the test set, flagging sizes never seen in training.
pub fn transfer_protocol(
    train: &[TrainSample],
    test: &[TrainSample],
    train_sizes: &[usize],
    net: NetConfig,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<(TransferReport, MiniPhysNet<f32>), EvalError> {
    if train_sizes.is_empty() || train_sizes.iter().any(|n| !(2..=4).contains(n)) {
        return Err(EvalError::InvalidInput(format!("bad train sizes {train_sizes:?}")));
    }
    let subset: Vec<TrainSample> = train.iter().filter(|s| train_sizes.contains(&s.n_blocks)).cloned().collect();
    let outcome = train_mini(&subset, net, cfg, loss)?;
    let held_out: Vec<usize> = (2..=4).filter(|n| !train_sizes.contains(n)).collect();
    let report = evaluate_with_held_out(&outcome.model, test, &held_out)?;
    let mut sizes = train_sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    Ok((
        TransferReport {
            train_sizes: sizes,
            train_count: subset.len(),
            best_lr: outcome.best_lr,
            best_epoch: outcome.best_epoch,
            report,
        },
        outcome.model,
    ))
}
