//! Labeled datasets and their distribution across agents.

use rand::seq::SliceRandom;

use super::{ProblemError, Shard};
use crate::rng::RngStream;

/// Dense labeled samples with features in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        feature_dim: usize,
        classes: usize,
    ) -> Result<Self, ProblemError> {
        if feature_dim == 0 || features.len() != labels.len() * feature_dim {
            return Err(ProblemError::DimensionMismatch {
                expected: labels.len() * feature_dim,
                actual: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(ProblemError::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            features,
            labels,
            feature_dim,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Overrides the class count (must cover every label).
    pub fn with_classes(mut self, classes: usize) -> Result<Self, ProblemError> {
        if let Some(&label) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(ProblemError::LabelOutOfRange { label, classes });
        }
        self.classes = classes;
        Ok(self)
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        Self {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_dim: self.feature_dim,
            classes: self.classes,
        }
    }

    fn shard(&self, owner: usize, indices: &[usize]) -> Result<Shard, ProblemError> {
        let part = self.select(indices);
        Shard::softmax(owner, self.feature_dim, self.classes, part.features, part.labels)
    }

    /// The first `k` samples after a seeded shuffle (all of them if `k ≥ len`).
    pub fn subsample(&self, k: usize, stream: RngStream) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream.rng());
        order.truncate(k);
        self.select(&order)
    }
}

/// Random even split over `n` agents. Each shard gets `⌊len/n⌋` samples; the
/// remainder of the shuffled order is dropped.
pub fn partition_iid(dataset: &Dataset, n: usize, stream: RngStream) -> Result<Vec<Shard>, ProblemError> {
    if n == 0 {
        return Err(ProblemError::InvalidInput("cannot partition over zero agents".into()));
    }
    let per_agent = dataset.len() / n;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream.rng());
    (0..n)
        .map(|w| dataset.shard(w, &order[w * per_agent..(w + 1) * per_agent]))
        .collect()
}

/// Single-class shards: agents `g·n/m .. (g+1)·n/m` split class `g`.
///
/// Every shard gets the same size, the smallest per-agent share across
/// classes; surplus samples of larger classes are dropped.
pub fn partition_noniid(
    dataset: &Dataset,
    n: usize,
    classes: usize,
    stream: RngStream,
) -> Result<Vec<Shard>, ProblemError> {
    if classes == 0 || !n.is_multiple_of(classes) || n == 0 {
        return Err(ProblemError::InvalidInput(format!(
            "{n} agents cannot be split evenly over {classes} classes"
        )));
    }
    if dataset.classes() > classes {
        return Err(ProblemError::LabelOutOfRange {
            label: dataset.classes() - 1,
            classes,
        });
    }
    let group = n / classes;
    let mut rng = stream.rng();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let per_agent = by_class.iter().map(|m| m.len() / group).min().unwrap_or(0);
    if per_agent == 0 {
        return Err(ProblemError::InvalidInput(
            "some class has fewer samples than agents assigned to it".into(),
        ));
    }
    (0..n)
        .map(|w| {
            let class = w / group;
            let slot = w % group;
            dataset.shard(w, &by_class[class][slot * per_agent..(slot + 1) * per_agent])
        })
        .collect()
}
