//! Per-round measurements.

use crate::model::ModelVector;
use crate::problems::{softmax_predict, Dataset};

/// `(1/(R·p)) Σ_c Σ_w (x_w[c] − mean_w x_w[c])²` over the given models.
pub fn model_variance(models: &[&ModelVector]) -> f64 {
    let Some(first) = models.first() else {
        return 0.0;
    };
    let p = first.dim();
    let r = models.len() as f64;
    let mut total = 0.0;
    for c in 0..p {
        let mean = models.iter().map(|m| m[c]).sum::<f64>() / r;
        total += models.iter().map(|m| (m[c] - mean) * (m[c] - mean)).sum::<f64>();
    }
    total / (r * p.max(1) as f64)
}

/// Top-1 accuracy of `model` on `test`; argmax ties go to the lowest class.
pub fn accuracy_probe(model: &ModelVector, test: &Dataset) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let classes = test.classes();
    let correct = test
        .labels()
        .iter()
        .enumerate()
        .filter(|&(i, &label)| softmax_predict(model.as_slice(), test.features(i), classes) == label)
        .count();
    correct as f64 / test.len() as f64
}

/// Per-coordinate Welford accumulator over non-overlapping windows of
/// gradient draws.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowVariance {
    window: usize,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    last: Option<f64>,
}

impl WindowVariance {
    pub fn new(dim: usize, window: usize) -> Self {
        Self {
            window: window.max(2),
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            last: None,
        }
    }

    pub fn push(&mut self, g: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(g) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
        if self.count == self.window {
            self.last = Some(self.m2.iter().sum::<f64>() / (n - 1.0));
            self.count = 0;
            self.mean.iter_mut().for_each(|v| *v = 0.0);
            self.m2.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Summed coordinate variance of the last completed window.
    pub fn last(&self) -> Option<f64> {
        self.last
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mv(v: &[f64]) -> ModelVector {
        ModelVector::from(v.to_vec())
    }

    #[test]
    fn variance_examples() {
        let a = mv(&[1.0, 2.0]);
        assert_eq!(model_variance(&[&a, &a, &a]), 0.0);
        assert_eq!(model_variance(&[&mv(&[0.0]), &mv(&[2.0])]), 1.0);
        let shifted: Vec<ModelVector> = [mv(&[0.0, 1.0]), mv(&[3.0, -1.0])]
            .iter()
            .map(|m| ModelVector::from(m.iter().map(|x| x + 10.0).collect::<Vec<_>>()))
            .collect();
        assert_relative_eq!(
            model_variance(&[&mv(&[0.0, 1.0]), &mv(&[3.0, -1.0])]),
            model_variance(&[&shifted[0], &shifted[1]]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_model_predicts_class_zero() {
        let test = Dataset::new(vec![0.5, 0.1, 0.9, 0.3], vec![0, 1, 0, 2], 1, 3).unwrap();
        assert_eq!(accuracy_probe(&ModelVector::zeros(3), &test), 0.5);
    }

    #[test]
    fn separable_toy_is_perfect() {
        // Feature 1.0 → class 0, feature −1.0 → class 1.
        let test = Dataset::new(vec![1.0, -1.0, 1.0], vec![0, 1, 0], 1, 2).unwrap();
        assert_eq!(accuracy_probe(&mv(&[5.0, -5.0]), &test), 1.0);
    }

    #[test]
    fn window_variance_matches_two_pass() {
        let draws = [[1.0, 0.0], [3.0, 2.0], [2.0, 7.0], [6.0, 1.0]];
        let mut w = WindowVariance::new(2, 4);
        for (i, d) in draws.iter().enumerate() {
            assert_eq!(w.last().is_some(), i >= 4);
            w.push(d);
        }
        let mut expected = 0.0;
        for c in 0..2 {
            let mean = draws.iter().map(|d| d[c]).sum::<f64>() / 4.0;
            expected += draws.iter().map(|d| (d[c] - mean).powi(2)).sum::<f64>() / 3.0;
        }
        assert_relative_eq!(w.last().unwrap(), expected, epsilon = 1e-12);
    }
}
