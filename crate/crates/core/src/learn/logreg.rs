use super::layers;
use super::scalar::Scalar;
use super::tensor::{ParamSpec, ParamStore};
use super::{mask_loss, LearnError, LossConfig, Model, ModelKind, Prediction, Target, MASK_STEPS};
use crate::render::NUM_CLASSES;
use crate::rng::SeededRng;

/// Width of the factored mask map.
pub const FACTOR_DIM: usize = 128;

/// Largest parameter count a model may allocate (256 MiB of f32).
pub const MAX_PARAMS: u64 = 1 << 26;

/// Logistic regression on raw pixels for the fall label, plus a linear
/// pixel-to-mask-logit map, optionally factored through 128 units.
#[derive(Debug, Clone, PartialEq)]
pub struct LogReg<T> {
    image_size: usize,
    factored: bool,
    params: ParamStore<T>,
}

impl<T: Scalar> LogReg<T> {
    pub fn specs(image_size: usize, factored: bool) -> Vec<ParamSpec> {
        let d = 3 * image_size * image_size;
        let m = Self::mask_outputs(image_size);
        let mut specs = vec![ParamSpec::new("fall.w", &[1, d]), ParamSpec::new("fall.b", &[1])];
        if factored {
            specs.push(ParamSpec::new("mask.u.w", &[FACTOR_DIM, d]));
            specs.push(ParamSpec::new("mask.u.b", &[FACTOR_DIM]));
            specs.push(ParamSpec::new("mask.v.w", &[m, FACTOR_DIM]));
            specs.push(ParamSpec::new("mask.v.b", &[m]));
        } else {
            specs.push(ParamSpec::new("mask.w", &[m, d]));
            specs.push(ParamSpec::new("mask.b", &[m]));
        }
        specs
    }

    pub fn mask_outputs(image_size: usize) -> usize {
        MASK_STEPS * NUM_CLASSES * image_size * image_size
    }

    pub fn param_count(image_size: usize, factored: bool) -> u64 {
        Self::specs(image_size, factored).iter().map(|s| s.len() as u64).sum()
    }

    pub fn zeros(image_size: usize, factored: bool) -> Result<Self, LearnError> {
        if image_size == 0 {
            return Err(LearnError::InvalidConfig("image size must be positive".into()));
        }
        let params = Self::param_count(image_size, factored);
        if params > MAX_PARAMS {
            return Err(LearnError::ModelTooLarge {
                params,
                limit: MAX_PARAMS,
            });
        }
        Ok(Self {
            image_size,
            factored,
            params: ParamStore::zeros(Self::specs(image_size, factored)),
        })
    }

    pub fn new(image_size: usize, factored: bool, seed: u64) -> Result<Self, LearnError> {
        let mut m = Self::zeros(image_size, factored)?;
        m.params.he_init(&mut SeededRng::new(seed));
        Ok(m)
    }

    pub fn from_params(image_size: usize, factored: bool, params: ParamStore<T>) -> Result<Self, LearnError> {
        let mut m = Self::zeros(image_size, factored)?;
        if params.specs() != m.params.specs() {
            return Err(LearnError::Checkpoint("parameter table does not match logreg".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn is_factored(&self) -> bool {
        self.factored
    }

    /// Mask-head parameter count (everything except the fall weights).
    pub fn mask_param_count(&self) -> usize {
        self.params.specs()[2..].iter().map(ParamSpec::len).sum()
    }

    /// Mask logits for all time steps, plus the hidden layer when factored.
    fn mask_logits(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let m = Self::mask_outputs(self.image_size);
        let mut out = vec![T::zero(); m];
        if self.factored {
            let mut h = vec![T::zero(); FACTOR_DIM];
            layers::linear_forward(x, self.params.get(2), self.params.get(3), &mut h);
            layers::linear_forward(&h, self.params.get(4), self.params.get(5), &mut out);
            (out, h)
        } else {
            layers::linear_forward(x, self.params.get(2), self.params.get(3), &mut out);
            (out, Vec::new())
        }
    }
}

impl<T: Scalar> Model<T> for LogReg<T> {
    fn kind(&self) -> ModelKind {
        if self.factored {
            ModelKind::LogregFactored
        } else {
            ModelKind::Logreg
        }
    }

    fn image_size(&self) -> usize {
        self.image_size
    }

    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn fall_logit(&self, image: &[T]) -> T {
        let mut z = [T::zero()];
        layers::linear_forward(image, self.params.get(0), self.params.get(1), &mut z);
        z[0]
    }

    fn forward_one(&self, image: &[T]) -> Prediction<T> {
        let (logits, _) = self.mask_logits(image);
        let plane = NUM_CLASSES * self.image_size * self.image_size;
        let pixels = self.image_size * self.image_size;
        Prediction {
            fall_prob: layers::sigmoid(self.fall_logit(image)),
            masks: logits
                .chunks_exact(plane)
                .map(|l| layers::softmax_planes(l, NUM_CLASSES, pixels))
                .collect(),
        }
    }

    /// Factored models run the mask map as whole-batch matrix products.
    fn batch_loss_and_grad(&self, images: &[&[T]], targets: &[Target], loss: &LossConfig, grad: &mut [T]) -> T {
        let masked: Vec<usize> = (0..images.len()).filter(|&i| targets[i].masks.is_some()).collect();
        if !self.factored || loss.lambda_mask <= 0.0 || masked.len() < 2 {
            return images
                .iter()
                .zip(targets)
                .map(|(x, t)| self.loss_and_grad(x, t, loss, grad))
                .fold(T::zero(), |a, b| a + b);
        }
        let mut total = T::zero();
        let (head, rest) = grad.split_at_mut(self.params.range(2).start);
        let (gw, gb) = head.split_at_mut(self.params.range(1).start);
        for (x, t) in images.iter().zip(targets) {
            let (l, dz) = layers::bce_with_logit(self.fall_logit(x), t.fell);
            total = total + l;
            layers::linear_backward(x, self.params.get(0), &[dz], gw, gb, false);
        }

        let (b, d, k) = (masked.len(), self.input_len(), FACTOR_DIM);
        let m = Self::mask_outputs(self.image_size);
        let (u, c, v, vb) = (self.params.get(2), self.params.get(3), self.params.get(4), self.params.get(5));
        let mut x = Vec::with_capacity(b * d);
        for &i in &masked {
            x.extend_from_slice(images[i]);
        }
        let mut h: Vec<T> = c.iter().copied().cycle().take(b * k).collect();
        T::gemm(b, d, k, T::one(), &x, d as isize, 1, u, 1, d as isize, T::one(), &mut h, k as isize, 1);
        let mut o: Vec<T> = vb.iter().copied().cycle().take(b * m).collect();
        T::gemm(b, k, m, T::one(), &h, k as isize, 1, v, 1, k as isize, T::one(), &mut o, m as isize, 1);

        // Overwrite each row of logits with its loss gradient.
        let lambda = T::from_f64(loss.lambda_mask);
        let plane = NUM_CLASSES * self.image_size * self.image_size;
        for (row, &i) in o.chunks_exact_mut(m).zip(&masked) {
            let masks = targets[i].masks.expect("filtered above");
            for (t, step) in row.chunks_exact_mut(plane).enumerate() {
                let (l, dl) = layers::softmax_ce(step, masks[t], NUM_CLASSES);
                total = total + l * lambda;
                for (dst, g) in step.iter_mut().zip(dl) {
                    *dst = g * lambda;
                }
            }
        }

        let off = self.params.range(2).start;
        let (u_part, v_part) = rest.split_at_mut(self.params.range(4).start - off);
        let (gu, gc) = u_part.split_at_mut(k * d);
        let (gv, gvb) = v_part.split_at_mut(m * k);
        T::gemm(m, b, k, T::one(), &o, 1, m as isize, &h, k as isize, 1, T::one(), gv, k as isize, 1);
        for row in o.chunks_exact(m) {
            for (a, &g) in gvb.iter_mut().zip(row) {
                *a = *a + g;
            }
        }
        let mut dh = vec![T::zero(); b * k];
        T::gemm(b, m, k, T::one(), &o, m as isize, 1, v, k as isize, 1, T::zero(), &mut dh, k as isize, 1);
        T::gemm(k, b, d, T::one(), &dh, 1, k as isize, &x, d as isize, 1, T::one(), gu, d as isize, 1);
        for row in dh.chunks_exact(k) {
            for (a, &g) in gc.iter_mut().zip(row) {
                *a = *a + g;
            }
        }
        total
    }

    fn loss_and_grad(&self, image: &[T], target: &Target, loss: &LossConfig, grad: &mut [T]) -> T {
        let (mut total, dz) = layers::bce_with_logit(self.fall_logit(image), target.fell);
        let (head, rest) = grad.split_at_mut(self.params.range(2).start);
        let (gw, gb) = head.split_at_mut(self.params.range(1).start);
        layers::linear_backward(image, self.params.get(0), &[dz], gw, gb, false);

        let Some(masks) = target.masks.filter(|_| loss.lambda_mask > 0.0) else {
            return total;
        };
        let (logits, hidden) = self.mask_logits(image);
        let plane = NUM_CLASSES * self.image_size * self.image_size;
        let per_step: Vec<Vec<T>> = logits.chunks_exact(plane).map(<[T]>::to_vec).collect();
        let mut d_logits = vec![Vec::new(); MASK_STEPS];
        total = total + mask_loss(&per_step, &masks, T::from_f64(loss.lambda_mask), &mut d_logits);
        let d_out: Vec<T> = d_logits.concat();

        let off = self.params.range(2).start;
        let local = |i: usize| {
            let r = self.params.range(i);
            r.start - off..r.end - off
        };
        if self.factored {
            let (r_uw, r_ub, r_vw) = (local(2), local(3), local(4));
            let (u_part, v_part) = rest.split_at_mut(r_vw.start);
            let (vw, vb) = v_part.split_at_mut(r_vw.len());
            let dh = layers::linear_backward(&hidden, self.params.get(4), &d_out, vw, vb, true)
                .expect("input gradient requested");
            let (uw, ub) = u_part.split_at_mut(r_ub.start);
            layers::linear_backward(image, self.params.get(2), &dh, &mut uw[r_uw], ub, false);
        } else {
            let r_w = local(2);
            let (w, b) = rest.split_at_mut(r_w.len());
            layers::linear_backward(image, self.params.get(2), &d_out, w, b, false);
        }
        total
    }
}
