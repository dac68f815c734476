use serde::{Deserialize, Serialize};

use super::EvalError;

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_pair(labels: &[&[u8]], preds: &[&[f32]], classes: usize) -> Result<(), EvalError> {
    if labels.len() != preds.len() {
        return Err(EvalError::LengthMismatch(labels.len(), preds.len()));
    }
    for (m, q) in labels.iter().zip(preds) {
        if q.len() != m.len() * classes {
            return Err(EvalError::LengthMismatch(m.len() * classes, q.len()));
        }
        if let Some(&c) = m.iter().find(|&&c| c as usize >= classes) {
            return Err(EvalError::InvalidInput(format!("label class {c} out of range")));
        }
    }
    Ok(())
}

/// Highest-scoring class per pixel; ties go to the lower class id.
pub fn argmax_classes(pred: &[f32], classes: usize) -> Vec<u8> {
    let pixels = pred.len() / classes;
    (0..pixels)
        .map(|p| {
            let mut best = 0;
            for c in 1..classes {
                if pred[c * pixels + p] > pred[best * pixels + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Mean over examples of the mean IoU over foreground classes present in
/// each label, against the argmax-binarized prediction.
pub fn mean_mask_iou(labels: &[&[u8]], preds: &[&[f32]], classes: usize) -> Result<f64, EvalError> {
    check_pair(labels, preds, classes)?;
    if labels.is_empty() {
        return Err(EvalError::InvalidInput("no masks to score".into()));
    }
    let mut total = 0.0;
    for (n, (m, q)) in labels.iter().zip(preds).enumerate() {
        let hat = argmax_classes(q, classes);
        let mut inter = vec![0usize; classes];
        let mut union = vec![0usize; classes];
        let mut present = vec![false; classes];
        for (&a, &b) in m.iter().zip(&hat) {
            present[a as usize] = true;
            if a == b {
                inter[a as usize] += 1;
                union[a as usize] += 1;
            } else {
                union[a as usize] += 1;
                union[b as usize] += 1;
            }
        }
        let fg: Vec<usize> = (1..classes).filter(|&c| present[c]).collect();
        if fg.is_empty() {
            return Err(EvalError::EmptyForeground(n));
        }
        total += fg.iter().map(|&c| inter[c] as f64 / union[c] as f64).sum::<f64>() / fg.len() as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Mean natural-log probability of the labelled class over all pixels.
pub fn log_likelihood_per_pixel(labels: &[&[u8]], preds: &[&[f32]], classes: usize) -> Result<f64, EvalError> {
    check_pair(labels, preds, classes)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (m, q) in labels.iter().zip(preds) {
        let pixels = m.len();
        for (p, &c) in m.iter().enumerate() {
            sum += (q[c as usize * pixels + p] as f64).max(PROB_FLOOR).ln();
        }
        count += pixels;
    }
    if count == 0 {
        return Err(EvalError::InvalidInput("no pixels to score".into()));
    }
    Ok(sum / count as f64)
}

/// Empirical class frequencies over every labelled pixel.
pub fn class_constant_baseline(labels: &[&[u8]], classes: usize) -> Result<Vec<f64>, EvalError> {
    let mut counts = vec![0usize; classes];
    for m in labels {
        for &c in m.iter() {
            *counts
                .get_mut(c as usize)
                .ok_or_else(|| EvalError::InvalidInput(format!("label class {c} out of range")))? += 1;
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(EvalError::InvalidInput("no labelled pixels".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Class planes holding `dist` at every pixel.
pub fn broadcast_distribution(dist: &[f64], pixels: usize) -> Vec<f32> {
    dist.iter().flat_map(|&p| std::iter::repeat_n(p as f32, pixels)).collect()
}

/// One-hot planes of the t = 0 mask, used as the prediction of the final mask.
pub fn mask_at_t0_baseline(mask0: &[u8], classes: usize) -> Vec<f32> {
    let pixels = mask0.len();
    let mut out = vec![0.0; classes * pixels];
    for (p, &c) in mask0.iter().enumerate() {
        out[c as usize * pixels + p] = 1.0;
    }
    out
}

/// Standard deviation of a binomial proportion at the observed accuracy.
pub fn binomial_ci(accuracy: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (accuracy * (1.0 - accuracy) / n as f64).max(0.0).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    /// (false positive rate, true positive rate), from (0,0) to (1,1).
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweeps thresholds over the distinct confidences in descending order;
/// equal confidences enter together. AUC by the trapezoid rule.
pub fn roc_curve(confidences: &[f64], labels: &[bool]) -> Result<Roc, EvalError> {
    if confidences.len() != labels.len() {
        return Err(EvalError::LengthMismatch(confidences.len(), labels.len()));
    }
    if confidences.iter().any(|c| c.is_nan()) {
        return Err(EvalError::InvalidInput("NaN confidence".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let c = confidences[order[i]];
        while i < order.len() && confidences[order[i]] == c {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let next = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        let prev = *points.last().unwrap();
        auc += (next.0 - prev.0) * (next.1 + prev.1) / 2.0;
        points.push(next);
    }
    Ok(Roc { points, auc })
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(EvalError::InvalidInput("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_fall: usize,
    pub false_fall: usize,
    pub true_stay: usize,
    pub false_stay: usize,
}

impl Confusion {
    pub fn from_predictions(predicted_fall: &[bool], fell: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &y) in predicted_fall.iter().zip(fell) {
            match (p, y) {
                (true, true) => c.true_fall += 1,
                (true, false) => c.false_fall += 1,
                (false, false) => c.true_stay += 1,
                (false, true) => c.false_stay += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.true_fall + self.false_fall + self.true_stay + self.false_stay
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.true_fall + self.true_stay) as f64 / self.total() as f64
    }
}
