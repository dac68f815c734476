use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logreg::LogReg;
use super::net::{MiniPhysNet, NetConfig};
use super::{layers, LearnError, LossConfig, Model, Target, MASK_STEPS};
use crate::dataset::Example;
use crate::rng::{derive_seed, SeededRng};

/// Gradient shards per batch. Fixed so the reduction order, and hence the
/// result, does not depend on the thread count.
const GRAD_SHARDS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_grid: Vec<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_grid: vec![0.1, 0.03, 0.01],
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(LearnError::InvalidConfig("lr_grid must hold positive learning rates".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LearnError::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(LearnError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training example as network input.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Vec<f32>,
    pub fell: bool,
    pub n_blocks: usize,
    pub masks: Option<[Vec<u8>; MASK_STEPS]>,
}

impl TrainSample {
    pub fn from_example(ex: &Example) -> Self {
        Self {
            image: ex.image.to_chw_f32(),
            fell: ex.record.fell,
            n_blocks: ex.record.n_blocks,
            masks: ex.masks.as_ref().map(|m| std::array::from_fn(|t| m[t].data.clone())),
        }
    }

    pub fn target(&self) -> Target<'_> {
        Target {
            fell: self.fell,
            masks: self.masks.as_ref().map(|m| std::array::from_fn(|t| m[t].as_slice())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub lr: f64,
    pub epoch: usize,
    pub loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<TrainLogEntry>,
    /// Learning rate and epoch of the selected parameters; epoch 0 is the
    /// initialization.
    pub best_lr: f64,
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl<M> TrainOutcome<M> {
    pub fn write_log<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.log {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Predicted fell iff p > 0.5.
pub fn fall_accuracy<M: Model<f32>>(model: &M, samples: &[&TrainSample]) -> f64 {
    fall_metrics(model, samples).0
}

/// Fall accuracy and mean fall cross-entropy.
pub fn fall_metrics<M: Model<f32>>(model: &M, samples: &[&TrainSample]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let per: Vec<(usize, f64)> = samples
        .par_iter()
        .map(|s| {
            let z = model.fall_logit(&s.image);
            let (l, _) = layers::bce_with_logit(z as f64, s.fell);
            (usize::from((z > 0.0) == s.fell), l)
        })
        .collect();
    let n = samples.len() as f64;
    let correct: usize = per.iter().map(|p| p.0).sum();
    (correct as f64 / n, per.iter().map(|p| p.1).sum::<f64>() / n)
}

/// Positions `i % 10 == 9` form the validation slice.
pub fn split_validation(samples: &[TrainSample]) -> (Vec<&TrainSample>, Vec<&TrainSample>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if i % 10 == 9 {
            val.push(s)
        } else {
            train.push(s)
        }
    }
    (train, val)
}

/// Summed loss, gradient and correct count over `batch`.
fn batch_gradient<M: Model<f32>>(model: &M, batch: &[&TrainSample], loss: &LossConfig) -> (f64, Vec<f32>, usize) {
    let n = model.params().count();
    let shard_len = batch.len().div_ceil(GRAD_SHARDS);
    let shards: Vec<(f64, Vec<f32>, usize)> = batch
        .par_chunks(shard_len.max(1))
        .map(|chunk| {
            let mut grad = vec![0.0f32; n];
            let correct = chunk
                .iter()
                .filter(|s| (model.fall_logit(&s.image) > 0.0) == s.fell)
                .count();
            let images: Vec<&[f32]> = chunk.iter().map(|s| s.image.as_slice()).collect();
            let targets: Vec<Target> = chunk.iter().map(|s| s.target()).collect();
            let total = model.batch_loss_and_grad(&images, &targets, loss, &mut grad) as f64;
            (total, grad, correct)
        })
        .collect();
    let mut iter = shards.into_iter();
    let (mut total, mut grad, mut correct) = iter.next().unwrap_or((0.0, vec![0.0; n], 0));
    for (l, g, c) in iter {
        total += l;
        correct += c;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (total, grad, correct)
}

/// Grid search over learning rates with SGD + momentum from `init`,
/// keeping the parameters with the best validation fall accuracy across
/// every (lr, epoch), initialization included. Accuracy ties go to the lower
/// validation fall loss, then to the earlier candidate.
pub fn train<M: Model<f32> + Clone>(
    init: &M,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome<M>, LearnError> {
    cfg.validate()?;
    loss.validate()?;
    if samples.is_empty() {
        return Err(LearnError::EmptyTrainSet);
    }
    let input = init.input_len();
    if let Some(s) = samples.iter().find(|s| s.image.len() != input) {
        return Err(LearnError::ShapeMismatch {
            expected: vec![input],
            got: vec![s.image.len()],
        });
    }
    let (train_set, val_set) = split_validation(samples);
    // Tiny sets have no validation slice; select on training accuracy.
    let val_set = if val_set.is_empty() { train_set.clone() } else { val_set };
    if train_set.is_empty() {
        return Err(LearnError::EmptyTrainSet);
    }

    let (init_acc, init_loss) = fall_metrics(init, &val_set);
    let mut best = (init_acc, init_loss, cfg.lr_grid[0], 0usize, init.clone());
    let mut log = Vec::new();
    let shuffle_seed = derive_seed(cfg.seed, 0x5348_5546);

    for &lr in &cfg.lr_grid {
        log.push(TrainLogEntry {
            lr,
            epoch: 0,
            loss: None,
            train_acc: None,
            val_acc: Some(init_acc),
            val_loss: Some(init_loss),
            status: "ok".into(),
        });
        let mut model = init.clone();
        let mut velocity = vec![0.0f32; model.params().count()];
        let (lr32, mu) = (lr as f32, cfg.momentum as f32);
        'epochs: for epoch in 1..=cfg.epochs {
            let mut order: Vec<&TrainSample> = train_set.clone();
            SeededRng::new(derive_seed(shuffle_seed, epoch as u64)).shuffle(&mut order);
            let (mut total, mut correct) = (0.0, 0usize);
            for batch in order.chunks(cfg.batch_size) {
                let (l, mut grad, c) = batch_gradient(&model, batch, loss);
                total += l;
                correct += c;
                let scale = 1.0 / batch.len() as f32;
                let params = &mut model.params_mut().data;
                let mut finite = l.is_finite();
                for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad.iter_mut()) {
                    *v = mu * *v + *g * scale;
                    *p -= lr32 * *v;
                    finite &= p.is_finite();
                }
                if !finite {
                    log.push(TrainLogEntry {
                        lr,
                        epoch,
                        loss: None,
                        train_acc: None,
                        val_acc: None,
                        val_loss: None,
                        status: "non_finite_loss".into(),
                    });
                    break 'epochs;
                }
            }
            let (val_acc, val_loss) = fall_metrics(&model, &val_set);
            log.push(TrainLogEntry {
                lr,
                epoch,
                loss: Some(total / train_set.len() as f64),
                train_acc: Some(correct as f64 / train_set.len() as f64),
                val_acc: Some(val_acc),
                val_loss: Some(val_loss),
                status: "ok".into(),
            });
            if val_acc > best.0 || (val_acc == best.0 && val_loss < best.1) {
                best = (val_acc, val_loss, lr, epoch, model.clone());
            }
        }
    }
    let (best_val_acc, _, best_lr, best_epoch, model) = best;
    Ok(TrainOutcome {
        model,
        log,
        best_lr,
        best_epoch,
        best_val_acc,
    })
}

pub fn train_mini(
    samples: &[TrainSample],
    net: NetConfig,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome<MiniPhysNet<f32>>, LearnError> {
    let init = MiniPhysNet::new(net, derive_seed(cfg.seed, 1))?;
    train(&init, samples, cfg, loss)
}

/// Pixel logistic regression for the fall label with a linear mask map,
/// trained on the same joint loss.
pub fn logreg_baseline(
    samples: &[TrainSample],
    image_size: usize,
    factored: bool,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome<LogReg<f32>>, LearnError> {
    let init = LogReg::new(image_size, factored, derive_seed(cfg.seed, 2))?;
    train(&init, samples, cfg, loss)
}
