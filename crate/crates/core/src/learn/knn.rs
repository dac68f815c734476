use rayon::prelude::*;

use super::LearnError;

/// Fraction of fell labels among the `k` L2-nearest training points, for
/// each query. Equal distances go to the lower training index.
pub fn knn_predict(
    train: &[Vec<f32>],
    labels: &[bool],
    queries: &[Vec<f32>],
    k: usize,
) -> Result<Vec<f64>, LearnError> {
    if train.is_empty() {
        return Err(LearnError::EmptyTrainSet);
    }
    if labels.len() != train.len() {
        return Err(LearnError::ShapeMismatch {
            expected: vec![train.len()],
            got: vec![labels.len()],
        });
    }
    if k == 0 || k > train.len() {
        return Err(LearnError::InvalidConfig(format!(
            "k = {k} with {} training points",
            train.len()
        )));
    }
    let dim = train[0].len();
    if let Some(bad) = train.iter().chain(queries).find(|f| f.len() != dim) {
        return Err(LearnError::ShapeMismatch {
            expected: vec![dim],
            got: vec![bad.len()],
        });
    }
    Ok(queries
        .par_iter()
        .map(|q| {
            let mut dist: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let d: f64 = t
                        .iter()
                        .zip(q)
                        .map(|(a, b)| {
                            let d = (a - b) as f64;
                            d * d
                        })
                        .sum();
                    (d, i)
                })
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < dist.len() {
                dist.select_nth_unstable_by(k - 1, cmp);
            }
            let fell = dist[..k].iter().filter(|(_, i)| labels[*i]).count();
            fell as f64 / k as f64
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_with_k1_returns_its_label() {
        let train = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![5.0, 5.0]];
        let labels = [false, true, false];
        let p = knn_predict(&train, &labels, &[vec![1.0, 1.0]], 1).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn fraction_of_fell_among_ten_nearest() {
        let train: Vec<Vec<f32>> = (0..20).map(|i| vec![i as f32]).collect();
        // nearest ten to -0.5 are 0..10; six of them fell
        let labels: Vec<bool> = (0..20).map(|i| !(6..10).contains(&i)).collect();
        let p = knn_predict(&train, &labels, &[vec![-0.5]], 10).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn equidistant_tie_goes_to_lower_index() {
        let train = vec![vec![-1.0], vec![1.0]];
        let p = knn_predict(&train, &[true, false], &[vec![0.0]], 1).unwrap();
        assert_eq!(p, vec![1.0]);
        let p = knn_predict(&train, &[false, true], &[vec![0.0]], 1).unwrap();
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn empty_train_set_is_an_error() {
        assert!(matches!(
            knn_predict(&[], &[], &[vec![0.0]], 1),
            Err(LearnError::EmptyTrainSet)
        ));
    }
}
