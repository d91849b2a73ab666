use crate::error::{Error, Result};

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Batch {
    /// Builds a batch from row-major `features` (`labels.len() × input_dim`).
    pub fn new(features: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("batch must contain at least one sample"));
        }
        if input_dim == 0 {
            return Err(Error::config("batch input dimension must be positive"));
        }
        if features.len() != labels.len() * input_dim {
            return Err(Error::dim(
                "batch features",
                labels.len() * input_dim,
                features.len(),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("batch features must be finite"));
        }
        Ok(Self {
            features,
            labels,
            input_dim,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::config("ragged feature rows"));
        }
        Self::new(rows.concat(), dim, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features
            .chunks_exact(self.input_dim)
            .zip(self.labels.iter().copied())
    }

    /// Copies the given rows, in order, into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.input_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::config(format!(
                    "row index {i} out of range for batch of {}",
                    self.len()
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.input_dim, labels)
    }

    /// Consecutive slice `[start, end)` of rows.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather(&idx)
    }

    pub fn concat(parts: &[&Batch]) -> Result<Self> {
        let dim = parts
            .first()
            .ok_or_else(|| Error::config("cannot concatenate zero batches"))?
            .input_dim;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.input_dim != dim {
                return Err(Error::dim("batch concat", dim, p.input_dim));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(features, dim, labels)
    }

    pub fn class_fraction(&self, class: usize) -> f64 {
        self.labels.iter().filter(|&&l| l == class).count() as f64 / self.len() as f64
    }
}
