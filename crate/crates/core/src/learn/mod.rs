//! Dense-array networks with hand-written backpropagation.

pub mod checkpoint;
pub mod knn;
pub mod layers;
pub mod logreg;
pub mod net;
pub mod scalar;
pub mod tensor;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use knn::knn_predict;
pub use logreg::LogReg;
pub use net::{MiniPhysNet, NetConfig};
pub use scalar::Scalar;
pub use tensor::{ParamSpec, ParamStore, Tensor};
pub use train::{
    fall_accuracy, logreg_baseline, train, train_mini, TrainConfig, TrainLogEntry, TrainOutcome, TrainSample,
};

use crate::render::NUM_CLASSES;

/// Number of predicted mask time steps.
pub const MASK_STEPS: usize = 4;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("model has {params} parameters, limit is {limit}")]
    ModelTooLarge { params: u64, limit: u64 },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("non-finite loss at lr {lr}, epoch {epoch}")]
    NonFiniteLoss { lr: f64, epoch: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mini,
    Logreg,
    LogregFactored,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mini => "mini",
            ModelKind::Logreg => "logreg",
            ModelKind::LogregFactored => "logreg-factored",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = LearnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mini" => Ok(ModelKind::Mini),
            "logreg" => Ok(ModelKind::Logreg),
            "logreg-factored" => Ok(ModelKind::LogregFactored),
            other => Err(LearnError::InvalidConfig(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_mask: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_mask: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.lambda_mask >= 0.0 && self.lambda_mask.is_finite() {
            Ok(())
        } else {
            Err(LearnError::InvalidConfig("lambda_mask must be >= 0".into()))
        }
    }
}

/// Labels for one example. Masks are class-id grids at t = 0, 1, 2, 4 s;
/// examples without masks contribute only the fall term.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub fell: bool,
    pub masks: Option<[&'a [u8]; MASK_STEPS]>,
}

/// Outputs for one example. Each mask is `NUM_CLASSES` planes of S×S
/// probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub fall_prob: T,
    pub masks: Vec<Vec<T>>,
}

/// Behaviour shared by the trainable models.
pub trait Model<T: Scalar>: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn image_size(&self) -> usize;
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Extra header flags stored in checkpoints.
    fn flags(&self) -> u32 {
        0
    }

    /// Logit of the fall probability for one `(3, S, S)` image.
    fn fall_logit(&self, image: &[T]) -> T;

    fn forward_one(&self, image: &[T]) -> Prediction<T>;

    /// Loss for one example; adds d loss / d params into `grad`.
    fn loss_and_grad(&self, image: &[T], target: &Target, loss: &LossConfig, grad: &mut [T]) -> T;

    /// Summed loss over a batch, adding gradients into `grad`. Models may
    /// override this with a faster batched path.
    fn batch_loss_and_grad(&self, images: &[&[T]], targets: &[Target], loss: &LossConfig, grad: &mut [T]) -> T {
        images
            .iter()
            .zip(targets)
            .map(|(x, t)| self.loss_and_grad(x, t, loss, grad))
            .fold(T::zero(), |a, b| a + b)
    }

    fn fall_prob(&self, image: &[T]) -> T {
        layers::sigmoid(self.fall_logit(image))
    }

    fn input_len(&self) -> usize {
        3 * self.image_size() * self.image_size()
    }

    fn forward(&self, batch: &Tensor<T>) -> Result<Vec<Prediction<T>>, LearnError> {
        let n = tensor::check_batch(batch, self.image_size())?;
        Ok((0..n).map(|i| self.forward_one(batch.row(i))).collect())
    }
}

/// Mask-loss term shared by all models: λ Σ_t mean-pixel CE, writing
/// d loss / d logits into `d_logits[t]`. Returns the weighted loss.
pub(crate) fn mask_loss<T: Scalar>(
    logits: &[Vec<T>],
    masks: &[&[u8]; MASK_STEPS],
    lambda: T,
    d_logits: &mut [Vec<T>],
) -> T {
    let mut total = T::zero();
    for t in 0..MASK_STEPS {
        let (l, mut d) = layers::softmax_ce(&logits[t], masks[t], NUM_CLASSES);
        for v in d.iter_mut() {
            *v = *v * lambda;
        }
        d_logits[t] = d;
        total = total + l * lambda;
    }
    total
}

/// A model of any kind, as loaded from a checkpoint.
pub enum AnyModel {
    Mini(MiniPhysNet<f32>),
    LogReg(LogReg<f32>),
}

impl AnyModel {
    pub fn as_model(&self) -> &dyn Model<f32> {
        match self {
            AnyModel::Mini(m) => m,
            AnyModel::LogReg(m) => m,
        }
    }

    pub fn as_model_mut(&mut self) -> &mut dyn Model<f32> {
        match self {
            AnyModel::Mini(m) => m,
            AnyModel::LogReg(m) => m,
        }
    }
}
