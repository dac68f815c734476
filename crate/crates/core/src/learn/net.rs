use serde::{Deserialize, Serialize};

use super::layers::{self, ConvShape, UpConvShape};
use super::scalar::Scalar;
use super::tensor::{ParamSpec, ParamStore};
use super::{mask_loss, LearnError, LossConfig, Model, ModelKind, Prediction, Target, MASK_STEPS};
use crate::render::NUM_CLASSES;
use crate::rng::SeededRng;

const TRUNK: [(usize, usize, usize, usize); 3] = [(3, 16, 5, 2), (16, 32, 3, 1), (32, 64, 3, 1)];
const HEAD: [(usize, usize); 3] = [(64, 32), (32, 16), (16, NUM_CLASSES)];
pub const FEATURE_DIM: usize = 64;

/// Flag bit recorded in checkpoints when all time steps share one head.
pub const FLAG_SHARED_HEADS: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub image_size: usize,
    pub shared_heads: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 56,
            shared_heads: false,
        }
    }
}

/// Three stride-2 convolutions down to S/8, a pooled logistic fall head
/// and per-time-step upsampling mask heads back to S.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniPhysNet<T> {
    cfg: NetConfig,
    params: ParamStore<T>,
}

struct TrunkCache<T> {
    acts: [Vec<T>; 3],
    pooled: Vec<T>,
    logit: T,
}

struct HeadCache<T> {
    acts: [Vec<T>; 2],
    logits: Vec<T>,
}

impl<T: Scalar> MiniPhysNet<T> {
    pub fn specs(cfg: &NetConfig) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for (i, &(ci, co, k, _)) in TRUNK.iter().enumerate() {
            specs.push(ParamSpec::new(format!("conv{}.w", i + 1), &[co, ci, k, k]));
            specs.push(ParamSpec::new(format!("conv{}.b", i + 1), &[co]));
        }
        specs.push(ParamSpec::new("fall.w", &[1, FEATURE_DIM]));
        specs.push(ParamSpec::new("fall.b", &[1]));
        for h in 0..Self::n_heads_for(cfg) {
            let prefix = if cfg.shared_heads {
                "mask".to_string()
            } else {
                format!("mask{h}")
            };
            for (j, &(ci, co)) in HEAD.iter().enumerate() {
                specs.push(ParamSpec::new(format!("{prefix}.up{}.w", j + 1), &[co, ci, 3, 3]));
                specs.push(ParamSpec::new(format!("{prefix}.up{}.b", j + 1), &[co]));
            }
        }
        specs
    }

    fn n_heads_for(cfg: &NetConfig) -> usize {
        if cfg.shared_heads {
            1
        } else {
            MASK_STEPS
        }
    }

    fn check(cfg: &NetConfig) -> Result<(), LearnError> {
        if cfg.image_size == 0 || !cfg.image_size.is_multiple_of(8) {
            return Err(LearnError::InvalidConfig(format!(
                "image size {} is not a positive multiple of 8",
                cfg.image_size
            )));
        }
        Ok(())
    }

    pub fn zeros(cfg: NetConfig) -> Result<Self, LearnError> {
        Self::check(&cfg)?;
        Ok(Self {
            params: ParamStore::zeros(Self::specs(&cfg)),
            cfg,
        })
    }

    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self, LearnError> {
        let mut net = Self::zeros(cfg)?;
        net.params.he_init(&mut SeededRng::new(seed));
        Ok(net)
    }

    pub fn from_params(cfg: NetConfig, params: ParamStore<T>) -> Result<Self, LearnError> {
        Self::check(&cfg)?;
        if params.specs() != Self::specs(&cfg).as_slice() {
            return Err(LearnError::Checkpoint("parameter table does not match network".into()));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn cast<U: Scalar>(&self) -> MiniPhysNet<U> {
        MiniPhysNet {
            cfg: self.cfg,
            params: self.params.cast(),
        }
    }

    fn trunk_shape(&self, i: usize) -> ConvShape {
        let (c_in, c_out, k, pad) = TRUNK[i];
        let h = self.cfg.image_size >> i;
        ConvShape { c_in, h, w: h, c_out, k, stride: 2, pad }
    }

    fn head_shape(&self, j: usize) -> UpConvShape {
        let (c_in, c_out) = HEAD[j];
        let h = self.cfg.image_size >> (3 - j);
        UpConvShape { c_in, h, w: h, c_out }
    }

    /// Index of the first parameter of head `h`.
    fn head_param(&self, h: usize) -> usize {
        8 + 6 * if self.cfg.shared_heads { 0 } else { h }
    }

    #[allow(clippy::needless_range_loop)]
    fn trunk(&self, image: &[T]) -> TrunkCache<T> {
        let p = &self.params;
        let mut input = image;
        let mut acts: [Vec<T>; 3] = Default::default();
        for i in 0..3 {
            let s = self.trunk_shape(i);
            let mut out = vec![T::zero(); s.out_len()];
            layers::conv_forward(input, &s, p.get(2 * i), p.get(2 * i + 1), &mut out);
            layers::relu_inplace(&mut out);
            acts[i] = out;
            input = &acts[i];
        }
        let hw = (self.cfg.image_size / 8).pow(2);
        let pooled = layers::global_avg_pool(&acts[2], FEATURE_DIM, hw);
        let mut z = [T::zero()];
        layers::linear_forward(&pooled, p.get(6), p.get(7), &mut z);
        TrunkCache { acts, pooled, logit: z[0] }
    }

    #[allow(clippy::needless_range_loop)]
    fn head(&self, h: usize, features: &[T]) -> HeadCache<T> {
        let base = self.head_param(h);
        let mut acts: [Vec<T>; 2] = Default::default();
        let mut logits = Vec::new();
        let mut input = features;
        for j in 0..3 {
            let s = self.head_shape(j);
            let mut out = vec![T::zero(); s.out_len()];
            let (w, b) = (self.params.get(base + 2 * j), self.params.get(base + 2 * j + 1));
            layers::upconv_forward(input, &s, w, b, &mut out);
            if j < 2 {
                layers::relu_inplace(&mut out);
                acts[j] = out;
                input = &acts[j];
            } else {
                logits = out;
            }
        }
        HeadCache { acts, logits }
    }

    /// Pooled 64-dim trunk features, for nearest-neighbour baselines.
    pub fn features(&self, image: &[T]) -> Vec<T> {
        self.trunk(image).pooled
    }

    /// On/off state of every ReLU for `image`. Finite differences are only
    /// meaningful between parameter values that share this pattern.
    pub fn activation_pattern(&self, image: &[T]) -> Vec<bool> {
        let trunk = self.trunk(image);
        let heads = self.head_outputs(&trunk.acts[2]);
        let on = |v: &T| *v > T::zero();
        let mut out: Vec<bool> = trunk.acts.iter().flat_map(|a| a.iter().map(on)).collect();
        for h in &heads {
            out.extend(h.acts.iter().flat_map(|a| a.iter().map(on)));
        }
        out
    }

    fn head_outputs(&self, features: &[T]) -> Vec<HeadCache<T>> {
        let n = Self::n_heads_for(&self.cfg);
        (0..n).map(|h| self.head(h, features)).collect()
    }

    /// Backward through head `h`, adding into `grad` and `d_features`.
    fn head_backward(
        &self,
        h: usize,
        features: &[T],
        cache: &HeadCache<T>,
        d_logits: &[T],
        grad: &mut [T],
        d_features: &mut [T],
    ) {
        let base = self.head_param(h);
        let mut d_out = d_logits.to_vec();
        for j in (0..3).rev() {
            let s = self.head_shape(j);
            let w = self.params.get(base + 2 * j);
            let (rw, rb) = (self.params.range(base + 2 * j), self.params.range(base + 2 * j + 1));
            let input: &[T] = if j == 0 { features } else { &cache.acts[j - 1] };
            let mut d_in = vec![T::zero(); s.in_len()];
            let (gw, gb) = split_two(grad, rw, rb);
            layers::upconv_backward(input, &s, w, &d_out, gw, gb, Some(&mut d_in));
            d_out = d_in;
            if j > 0 {
                layers::relu_backward(&cache.acts[j - 1], &mut d_out);
            }
        }
        for (a, b) in d_features.iter_mut().zip(&d_out) {
            *a = *a + *b;
        }
    }
}

/// Two disjoint mutable sub-slices of `buf`, `a` before `b`.
fn split_two<T>(buf: &mut [T], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

impl<T: Scalar> Model<T> for MiniPhysNet<T> {
    fn kind(&self) -> ModelKind {
        ModelKind::Mini
    }

    fn image_size(&self) -> usize {
        self.cfg.image_size
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn flags(&self) -> u32 {
        if self.cfg.shared_heads {
            FLAG_SHARED_HEADS
        } else {
            0
        }
    }

    fn fall_logit(&self, image: &[T]) -> T {
        self.trunk(image).logit
    }

    fn forward_one(&self, image: &[T]) -> Prediction<T> {
        let trunk = self.trunk(image);
        let heads = self.head_outputs(&trunk.acts[2]);
        let pixels = self.cfg.image_size * self.cfg.image_size;
        let masks = (0..MASK_STEPS)
            .map(|t| {
                let h = if self.cfg.shared_heads { 0 } else { t };
                layers::softmax_planes(&heads[h].logits, NUM_CLASSES, pixels)
            })
            .collect();
        Prediction {
            fall_prob: layers::sigmoid(trunk.logit),
            masks,
        }
    }

    fn loss_and_grad(&self, image: &[T], target: &Target, loss: &LossConfig, grad: &mut [T]) -> T {
        let trunk = self.trunk(image);
        let (mut total, dz) = layers::bce_with_logit(trunk.logit, target.fell);
        let feat_len = trunk.acts[2].len();
        let mut d_feat = vec![T::zero(); feat_len];

        // fall head
        let (rw, rb) = (self.params.range(6), self.params.range(7));
        let (gw, gb) = split_two(grad, rw, rb);
        let d_pooled = layers::linear_backward(&trunk.pooled, self.params.get(6), &[dz], gw, gb, true)
            .expect("input gradient requested");
        let hw = feat_len / FEATURE_DIM;
        for (a, b) in d_feat.iter_mut().zip(layers::global_avg_pool_backward(&d_pooled, hw)) {
            *a = *a + b;
        }

        if let (Some(masks), true) = (target.masks, loss.lambda_mask > 0.0) {
            let heads = self.head_outputs(&trunk.acts[2]);
            let logits: Vec<Vec<T>> = (0..MASK_STEPS)
                .map(|t| heads[if self.cfg.shared_heads { 0 } else { t }].logits.clone())
                .collect();
            let mut d_logits = vec![Vec::new(); MASK_STEPS];
            total = total + mask_loss(&logits, &masks, T::from_f64(loss.lambda_mask), &mut d_logits);
            for (t, d) in d_logits.iter().enumerate() {
                let h = if self.cfg.shared_heads { 0 } else { t };
                self.head_backward(h, &trunk.acts[2], &heads[h], d, grad, &mut d_feat);
            }
        }

        // trunk
        let mut d_out = d_feat;
        for i in (0..3).rev() {
            layers::relu_backward(&trunk.acts[i], &mut d_out);
            let s = self.trunk_shape(i);
            let input: &[T] = if i == 0 { image } else { &trunk.acts[i - 1] };
            let (rw, rb) = (self.params.range(2 * i), self.params.range(2 * i + 1));
            let (gw, gb) = split_two(grad, rw, rb);
            if i == 0 {
                layers::conv_backward(input, &s, self.params.get(0), &d_out, gw, gb, None);
            } else {
                let mut d_in = vec![T::zero(); s.in_len()];
                layers::conv_backward(input, &s, self.params.get(2 * i), &d_out, gw, gb, Some(&mut d_in));
                d_out = d_in;
            }
        }
        total
    }
}
