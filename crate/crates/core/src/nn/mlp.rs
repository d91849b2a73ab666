use rand::Rng;
use serde::{Deserialize, Serialize};

use super::objective::{finite_difference_gradient, BatchObjective};
use super::{Batch, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Dense feed-forward network. Hidden layers use `activation`; the output
/// layer is linear and produces one logit per class.
///
/// Parameters are laid out layer by layer: the `out × in` weight matrix in
/// row-major order followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    layer_sizes: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl MlpArchitecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let arch = Self {
            layer_sizes,
            activation,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(
                "model.layer_sizes needs at least an input and an output layer",
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("model.layer_sizes entries must be >= 1"));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated architecture")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(fan_in, fan_out, offset)` for each layer.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let here = offset;
            offset += w[0] * w[1] + w[1];
            (w[0], w[1], here)
        })
    }

    /// Per-layer uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// for both weights and biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out, _) in self.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_in * fan_out + fan_out) {
                values.push(rng.random_range(-bound..=bound));
            }
        }
        ParamVector::new(values).expect("finite initialization")
    }

    pub(crate) fn check(&self, params: &[f64], batch: &Batch) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim(
                "model parameters",
                self.param_count(),
                params.len(),
            ));
        }
        if batch.input_dim() != self.input_dim() {
            return Err(Error::dim(
                "batch input dimension",
                self.input_dim(),
                batch.input_dim(),
            ));
        }
        let c = self.classes();
        if let Some(&bad) = batch.labels().iter().find(|&&l| l >= c) {
            return Err(Error::config(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        Ok(())
    }

    /// Runs one sample forward, leaving every layer's output in `acts`
    /// (`acts[0]` is the input, the last entry the logits).
    fn forward_sample(&self, params: &[f64], x: &[f64], acts: &mut Vec<Vec<f64>>) {
        let n_layers = self.layer_sizes.len() - 1;
        acts.resize_with(n_layers + 1, Vec::new);
        acts[0].clear();
        acts[0].extend_from_slice(x);
        for (l, (fan_in, fan_out, off)) in self.layers().enumerate() {
            let (head, tail) = acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            out.clear();
            let w = &params[off..off + fan_in * fan_out];
            let b = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let hidden = l + 1 < n_layers;
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let z = b[o] + row.iter().zip(input).map(|(wi, xi)| wi * xi).sum::<f64>();
                out.push(if hidden { self.activation.apply(z) } else { z });
            }
        }
    }
}

/// Logit matrix, `rows × classes`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    classes: usize,
    values: Vec<f64>,
}

impl Logits {
    pub fn new(values: Vec<f64>, classes: usize) -> Result<Self> {
        if classes == 0 || !values.len().is_multiple_of(classes) {
            return Err(Error::config("logit matrix shape is inconsistent"));
        }
        Ok(Self { classes, values })
    }

    pub fn rows(&self) -> usize {
        self.values.len() / self.classes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..(i + 1) * self.classes]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Index of the largest logit per row; ties go to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Softmax probability of `class` for each row.
    pub fn probability(&self, class: usize) -> Vec<f64> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let lse = log_sum_exp(row);
                (row[class] - lse).exp()
            })
            .collect()
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn forward(arch: &MlpArchitecture, params: &ParamVector, batch: &Batch) -> Result<Logits> {
    forward_raw(arch, params, batch)
}

pub(crate) fn forward_raw(arch: &MlpArchitecture, params: &[f64], batch: &Batch) -> Result<Logits> {
    arch.check(params, batch)?;
    let mut acts = Vec::new();
    let mut values = Vec::with_capacity(batch.len() * arch.classes());
    for (x, _) in batch.rows() {
        arch.forward_sample(params, x, &mut acts);
        values.extend_from_slice(acts.last().expect("at least one layer"));
    }
    Logits::new(values, arch.classes())
}

/// Mean softmax cross-entropy.
pub fn loss_ce(logits: &Logits, labels: &[usize]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::dim("labels", logits.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::config("cross-entropy of an empty batch"));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        if y >= row.len() {
            return Err(Error::config(format!("label {y} out of range")));
        }
        total += log_sum_exp(row) - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// Loss and its gradient by backpropagation.
pub fn loss_and_grad(
    arch: &MlpArchitecture,
    params: &[f64],
    batch: &Batch,
) -> Result<(f64, Vec<f64>)> {
    arch.check(params, batch)?;
    let layers: Vec<_> = arch.layers().collect();
    let mut grad = vec![0.0; params.len()];
    let mut acts = Vec::new();
    let mut loss = 0.0;
    let mut delta = Vec::new();
    let mut prev = Vec::new();

    for (x, y) in batch.rows() {
        arch.forward_sample(params, x, &mut acts);
        let logits = acts.last().expect("output layer");
        let lse = log_sum_exp(logits);
        loss += lse - logits[y];

        delta.clear();
        delta.extend(logits.iter().map(|z| (z - lse).exp()));
        delta[y] -= 1.0;

        for (l, &(fan_in, fan_out, off)) in layers.iter().enumerate().rev() {
            let input = &acts[l];
            let w_end = off + fan_in * fan_out;
            for o in 0..fan_out {
                let d = delta[o];
                let g_row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, xi) in g_row.iter_mut().zip(input) {
                    *g += d * xi;
                }
                grad[w_end + o] += d;
            }
            if l > 0 {
                prev.clear();
                prev.resize(fan_in, 0.0);
                for o in 0..fan_out {
                    let d = delta[o];
                    let row = &params[off + o * fan_in..off + (o + 1) * fan_in];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= arch.activation.derivative_from_output(*a);
                }
                std::mem::swap(&mut delta, &mut prev);
            }
        }
    }

    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Gradient of the mean cross-entropy with respect to the parameters.
pub fn grad(arch: &MlpArchitecture, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    let (_, g) = loss_and_grad(arch, params, batch)?;
    ParamVector::new(g)
}

/// Central-difference gradient, one coordinate at a time.
pub fn grad_fd(
    arch: &MlpArchitecture,
    params: &ParamVector,
    batch: &Batch,
    eps: f64,
) -> Result<ParamVector> {
    let obj = BatchObjective::new(arch, batch);
    ParamVector::new(finite_difference_gradient(&obj, params, eps)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};
    use rand::Rng;

    fn random_batch(rng: &mut impl Rng, n: usize, dim: usize, classes: usize) -> Batch {
        let features = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(features, dim, labels).unwrap()
    }

    /// Independent dense evaluation: explicit matrices, no shared code path.
    fn dense_reference(sizes: &[usize], act: Activation, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            let mut mat = vec![vec![0.0; fi]; fo];
            for (o, row) in mat.iter_mut().enumerate() {
                for (i, cell) in row.iter_mut().enumerate() {
                    *cell = params[off + o * fi + i];
                }
            }
            let bias = &params[off + fi * fo..off + fi * fo + fo];
            let mut next = vec![0.0; fo];
            for o in 0..fo {
                let mut z = bias[o];
                for i in 0..fi {
                    z += mat[o][i] * h[i];
                }
                next[o] = if l + 2 < sizes.len() {
                    match act {
                        Activation::Relu => {
                            if z > 0.0 {
                                z
                            } else {
                                0.0
                            }
                        }
                        Activation::Tanh => z.tanh(),
                    }
                } else {
                    z
                };
            }
            off += fi * fo + fo;
            h = next;
        }
        h
    }

    #[test]
    fn param_count_matches_layout() {
        let arch = MlpArchitecture::new(vec![2, 16, 2], Activation::Tanh).unwrap();
        assert_eq!(arch.param_count(), 2 * 16 + 16 + 16 * 2 + 2);
        assert!(MlpArchitecture::new(vec![3], Activation::Tanh).is_err());
        assert!(MlpArchitecture::new(vec![3, 0, 2], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let arch = MlpArchitecture::new(vec![3, 5, 4], Activation::Relu).unwrap();
        let mut rng = stream(1, Domain::Data, 0, 0);
        let batch = random_batch(&mut rng, 6, 3, 4);
        let logits = forward(&arch, &ParamVector::zeros(arch.param_count()), &batch).unwrap();
        assert!(logits.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer() {
        let arch = MlpArchitecture::new(vec![2, 2], Activation::Tanh).unwrap();
        let params = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let batch = Batch::new(vec![1.0, 2.0], 2, vec![0]).unwrap();
        let logits = forward(&arch, &params, &batch).unwrap();
        assert_eq!(logits.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn forward_matches_dense_reference() {
        let mut rng = stream(2, Domain::Data, 0, 0);
        for act in [Activation::Relu, Activation::Tanh] {
            let arch = MlpArchitecture::new(vec![2, 8, 2], act).unwrap();
            let params = arch.init_params(&mut rng);
            let batch = random_batch(&mut rng, 5, 2, 2);
            let logits = forward(&arch, &params, &batch).unwrap();
            for i in 0..5 {
                let expected = dense_reference(arch.layer_sizes(), act, &params, batch.row(i));
                for (a, b) in logits.row(i).iter().zip(&expected) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let arch = MlpArchitecture::new(vec![2, 2], Activation::Tanh).unwrap();
        let batch = Batch::new(vec![1.0, 2.0, 3.0], 3, vec![0]).unwrap();
        assert!(matches!(
            forward(&arch, &ParamVector::zeros(6), &batch),
            Err(Error::Dimension { .. })
        ));
        let ok = Batch::new(vec![1.0, 2.0], 2, vec![0]).unwrap();
        assert!(forward(&arch, &ParamVector::zeros(5), &ok).is_err());
        let bad_label = Batch::new(vec![1.0, 2.0], 2, vec![2]).unwrap();
        assert!(grad(&arch, &ParamVector::zeros(6), &bad_label).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let zeros = Logits::new(vec![0.0; 6], 2).unwrap();
        assert!((loss_ce(&zeros, &[0, 1, 1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let zeros5 = Logits::new(vec![0.0; 10], 5).unwrap();
        assert!((loss_ce(&zeros5, &[0, 4]).unwrap() - 5f64.ln()).abs() < 1e-15);
        let saturated = Logits::new(vec![30.0, 0.0, 0.0, 30.0], 2).unwrap();
        assert!(loss_ce(&saturated, &[0, 1]).unwrap() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_sample_reference() {
        let mut rng = stream(3, Domain::Data, 0, 0);
        for _ in 0..20 {
            let classes = rng.random_range(2..6);
            let n = rng.random_range(1..10);
            let values: Vec<f64> = (0..n * classes)
                .map(|_| rng.random_range(-10.0..10.0))
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let mut expected = 0.0;
            for i in 0..n {
                let row = &values[i * classes..(i + 1) * classes];
                let denom: f64 = row.iter().map(|v| v.exp()).sum();
                expected += -(row[labels[i]].exp() / denom).ln();
            }
            expected /= n as f64;
            let got = loss_ce(&Logits::new(values, classes).unwrap(), &labels).unwrap();
            assert!(got >= 0.0);
            assert!((got - expected).abs() < 1e-10 * expected.max(1.0));
        }
    }

    #[test]
    fn gradient_vanishes_at_symmetric_minimum() {
        // Every input appears once with each label: zero weights and biases
        // give uniform softmax, which is the minimizer of the convex loss.
        let arch = MlpArchitecture::new(vec![1, 2], Activation::Tanh).unwrap();
        let batch = Batch::new(vec![1.0, 1.0, -1.0, -1.0], 1, vec![0, 1, 0, 1]).unwrap();
        let g = grad(&arch, &ParamVector::zeros(4), &batch).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = stream(4, Domain::Data, 0, 0);
        for act in [Activation::Tanh, Activation::Relu] {
            let arch = MlpArchitecture::new(vec![2, 4, 2], act).unwrap();
            let params = arch.init_params(&mut rng);
            let batch = random_batch(&mut rng, 8, 2, 2);
            let g = grad(&arch, &params, &batch).unwrap();
            let fd = grad_fd(&arch, &params, &batch, 1e-6).unwrap();
            for (a, b) in g.iter().zip(fd.iter()) {
                let denom = a.abs().max(b.abs()).max(1e-6);
                assert!((a - b).abs() / denom < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let mut rng = stream(5, Domain::Data, 0, 0);
        let arch = MlpArchitecture::new(vec![2, 8, 2], Activation::Tanh).unwrap();
        let params = arch.init_params(&mut rng);
        let batch = random_batch(&mut rng, 7, 2, 2);
        let doubled = Batch::concat(&[&batch, &batch]).unwrap();
        let (l1, g1) = loss_and_grad(&arch, &params, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&arch, &params, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let logits = Logits::new(vec![0.0, 0.0, 1.0, 1.0, 0.5, 2.0], 2).unwrap();
        assert_eq!(logits.argmax(), vec![0, 0, 1]);
    }
}
