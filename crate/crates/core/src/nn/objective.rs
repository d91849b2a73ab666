use super::mlp::{forward_raw, loss_and_grad, loss_ce, MlpArchitecture};
use super::Batch;
use crate::error::{Error, Result};

/// A differentiable scalar function of a flat parameter vector.
///
/// The curvature tools only need this, which lets them run on the MLP loss
/// and on closed-form quadratics alike.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn loss(&self, params: &[f64]) -> Result<f64>;
    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>>;
}

/// Mean cross-entropy of an MLP on one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchObjective<'a> {
    arch: &'a MlpArchitecture,
    batch: &'a Batch,
}

impl<'a> BatchObjective<'a> {
    pub fn new(arch: &'a MlpArchitecture, batch: &'a Batch) -> Self {
        Self { arch, batch }
    }
}

impl Objective for BatchObjective<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn loss(&self, params: &[f64]) -> Result<f64> {
        let logits = forward_raw(self.arch, params, self.batch)?;
        loss_ce(&logits, self.batch.labels())
    }

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        loss_and_grad(self.arch, params, self.batch).map(|(_, g)| g)
    }
}

/// `inner(θ) + (μ/2)‖θ − anchor‖²`, the FedProx local objective.
#[derive(Debug, Clone, Copy)]
pub struct ProximalObjective<'a, O> {
    inner: &'a O,
    anchor: &'a [f64],
    mu: f64,
}

impl<'a, O: Objective> ProximalObjective<'a, O> {
    pub fn new(inner: &'a O, anchor: &'a [f64], mu: f64) -> Self {
        Self { inner, anchor, mu }
    }
}

impl<O: Objective> Objective for ProximalObjective<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn loss(&self, params: &[f64]) -> Result<f64> {
        let penalty: f64 = params
            .iter()
            .zip(self.anchor)
            .map(|(p, a)| (p - a) * (p - a))
            .sum();
        Ok(self.inner.loss(params)? + 0.5 * self.mu * penalty)
    }

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.inner.gradient(params)?;
        for ((gi, p), a) in g.iter_mut().zip(params).zip(self.anchor) {
            *gi += self.mu * (p - a);
        }
        Ok(g)
    }
}

/// `L(θ) = (c/2) θᵀAθ` for a symmetric `A`; its Hessian is `cA` everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    n: usize,
    matrix: Vec<f64>,
    scale: f64,
}

impl QuadraticObjective {
    /// `matrix` is row-major `n × n` and must be symmetric.
    pub fn new(matrix: Vec<f64>, n: usize) -> Result<Self> {
        if matrix.len() != n * n {
            return Err(Error::dim("quadratic matrix", n * n, matrix.len()));
        }
        for i in 0..n {
            for j in 0..i {
                if matrix[i * n + j] != matrix[j * n + i] {
                    return Err(Error::config("quadratic matrix must be symmetric"));
                }
            }
        }
        Ok(Self {
            n,
            matrix,
            scale: 1.0,
        })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut matrix = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            matrix[i * n + i] = *d;
        }
        Self {
            n,
            matrix,
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    fn apply(&self, params: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let row = &self.matrix[i * self.n..(i + 1) * self.n];
                self.scale * row.iter().zip(params).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect()
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.n
    }

    fn loss(&self, params: &[f64]) -> Result<f64> {
        if params.len() != self.n {
            return Err(Error::dim("quadratic objective", self.n, params.len()));
        }
        let ax = self.apply(params);
        Ok(0.5 * params.iter().zip(&ax).map(|(x, y)| x * y).sum::<f64>())
    }

    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        if params.len() != self.n {
            return Err(Error::dim("quadratic objective", self.n, params.len()));
        }
        Ok(self.apply(params))
    }
}

/// `(L(θ + εeᵢ) − L(θ − εeᵢ)) / 2ε` for every coordinate `i`.
pub fn finite_difference_gradient<O: Objective + ?Sized>(
    obj: &O,
    params: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    if params.len() != obj.dim() {
        return Err(Error::dim(
            "finite-difference parameters",
            obj.dim(),
            params.len(),
        ));
    }
    let mut probe = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + eps;
        let up = obj.loss(&probe)?;
        probe[i] = params[i] - eps;
        let down = obj.loss(&probe)?;
        probe[i] = params[i];
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}
