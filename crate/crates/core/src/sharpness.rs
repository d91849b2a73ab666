//! Loss-landscape sharpness: Hessian-vector products by central differences
//! of gradients, power iteration for the dominant eigenvalue, and the median
//! of that eigenvalue over the full batches of a training set.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, BatchObjective, MlpArchitecture, Objective, ParamVector};
use crate::rng::{stream, Domain};

/// Largest parameter count [`dense_hessian`] accepts.
pub const DENSE_HESSIAN_LIMIT: usize = 200;

fn default_max_iters() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-6
}
fn default_hvp_eps() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessConfig {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_hvp_eps")]
    pub hvp_eps: f64,
    /// Batch size for the scan; the training batch size when unset.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            tol: default_tol(),
            hvp_eps: default_hvp_eps(),
            batch_size: None,
        }
    }
}

impl SharpnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("training.sharpness.max_iters must be >= 1"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::config("training.sharpness.tol must be positive"));
        }
        if !(self.hvp_eps > 0.0 && self.hvp_eps.is_finite()) {
            return Err(Error::config("training.sharpness.hvp_eps must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("training.sharpness.batch_size must be >= 1"));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `H·v ≈ (∇L(θ + εv̂) − ∇L(θ − εv̂)) / 2ε · ‖v‖` with `v̂ = v / ‖v‖`.
pub fn hessian_vector_product<O: Objective + ?Sized>(
    obj: &O,
    params: &[f64],
    v: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if v.len() != params.len() {
        return Err(Error::dim("hvp direction", params.len(), v.len()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config("hvp step must be positive"));
    }
    let scale = norm(v);
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::config(
            "hvp direction must be a finite non-zero vector",
        ));
    }
    let plus: Vec<f64> = params
        .iter()
        .zip(v)
        .map(|(p, d)| p + eps * d / scale)
        .collect();
    let minus: Vec<f64> = params
        .iter()
        .zip(v)
        .map(|(p, d)| p - eps * d / scale)
        .collect();
    let gp = obj.gradient(&plus)?;
    let gm = obj.gradient(&minus)?;
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(a, b)| (a - b) / (2.0 * eps) * scale)
        .collect())
}

/// Hessian-vector product of the MLP loss on `batch`.
pub fn hvp(
    arch: &MlpArchitecture,
    params: &ParamVector,
    batch: &Batch,
    v: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    hessian_vector_product(&BatchObjective::new(arch, batch), params, v, eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerIteration {
    pub eigenvalue: f64,
    pub eigenvector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on the Hessian from a given start direction.
///
/// The estimate is the Rayleigh quotient `vᵀHv` of the current unit vector,
/// so a dominant negative eigenvalue is reported with its sign. Stops once
/// successive estimates differ by at most `tol · max(1, |λ|)`.
pub fn dominant_eigenvalue<O: Objective + ?Sized>(
    obj: &O,
    params: &[f64],
    start: &[f64],
    max_iters: usize,
    tol: f64,
    eps: f64,
) -> Result<PowerIteration> {
    if max_iters == 0 {
        return Err(Error::config("power iteration needs max_iters >= 1"));
    }
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::config("power iteration tolerance must be positive"));
    }
    let n0 = norm(start);
    if n0 == 0.0 || !n0.is_finite() {
        return Err(Error::config("power iteration start must be non-zero"));
    }
    let mut v: Vec<f64> = start.iter().map(|x| x / n0).collect();
    let mut previous: Option<f64> = None;
    let mut eigenvalue = 0.0;
    for t in 1..=max_iters {
        let hv = hessian_vector_product(obj, params, &v, eps)?;
        eigenvalue = dot(&v, &hv);
        if !eigenvalue.is_finite() {
            return Err(Error::Numeric(
                "power iteration produced a non-finite estimate".into(),
            ));
        }
        let h_norm = norm(&hv);
        if h_norm == 0.0 {
            return Ok(PowerIteration {
                eigenvalue: 0.0,
                eigenvector: v,
                iterations: t,
                converged: true,
            });
        }
        v = hv.iter().map(|x| x / h_norm).collect();
        if let Some(p) = previous {
            if (eigenvalue - p).abs() <= tol * eigenvalue.abs().max(1.0) {
                return Ok(PowerIteration {
                    eigenvalue,
                    eigenvector: v,
                    iterations: t,
                    converged: true,
                });
            }
        }
        previous = Some(eigenvalue);
    }
    Ok(PowerIteration {
        eigenvalue,
        eigenvector: v,
        iterations: max_iters,
        converged: false,
    })
}

/// Uniformly random unit direction.
pub fn random_unit<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let len = norm(&v);
        if len > 0.0 {
            return v.into_iter().map(|x| x / len).collect();
        }
    }
}

/// Dominant Hessian eigenvalue of the MLP loss on one batch, from a random start.
pub fn power_iteration<R: Rng + ?Sized>(
    arch: &MlpArchitecture,
    params: &ParamVector,
    batch: &Batch,
    max_iters: usize,
    tol: f64,
    rng: &mut R,
) -> Result<PowerIteration> {
    let start = random_unit(params.len(), rng);
    dominant_eigenvalue(
        &BatchObjective::new(arch, batch),
        params,
        &start,
        max_iters,
        tol,
        default_hvp_eps(),
    )
}

/// Dense Hessian from central differences of the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHessian {
    pub n: usize,
    /// Row-major, symmetrized as `(H + Hᵀ) / 2`.
    pub values: Vec<f64>,
    /// `max |H − Hᵀ|` before symmetrization.
    pub asymmetry: f64,
}

impl DenseHessian {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

pub fn dense_hessian_of<O: Objective + ?Sized>(
    obj: &O,
    params: &[f64],
    eps: f64,
) -> Result<DenseHessian> {
    let n = params.len();
    if n > DENSE_HESSIAN_LIMIT {
        return Err(Error::config(format!(
            "dense Hessian limited to {DENSE_HESSIAN_LIMIT} parameters, got {n}"
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config("finite-difference step must be positive"));
    }
    let mut raw = vec![0.0; n * n];
    let mut probe = params.to_vec();
    for j in 0..n {
        probe[j] = params[j] + eps;
        let gp = obj.gradient(&probe)?;
        probe[j] = params[j] - eps;
        let gm = obj.gradient(&probe)?;
        probe[j] = params[j];
        for i in 0..n {
            raw[i * n + j] = (gp[i] - gm[i]) / (2.0 * eps);
        }
    }
    let mut asymmetry: f64 = 0.0;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            asymmetry = asymmetry.max((raw[i * n + j] - raw[j * n + i]).abs());
            values[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
        }
    }
    Ok(DenseHessian {
        n,
        values,
        asymmetry,
    })
}

/// Dense Hessian of the MLP loss on `batch`; only for tiny models.
pub fn dense_hessian(
    arch: &MlpArchitecture,
    params: &ParamVector,
    batch: &Batch,
    eps: f64,
) -> Result<DenseHessian> {
    dense_hessian_of(&BatchObjective::new(arch, batch), params, eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessResult {
    pub per_batch_eigenvalues: Vec<f64>,
    pub median_eigenvalue: f64,
    pub iterations_used: Vec<usize>,
    pub converged_flags: Vec<bool>,
}

/// Median with the lower middle element for even counts.
pub fn median_lower(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Dominant eigenvalue per objective, all from one shared start direction,
/// and their median.
pub fn median_dominant_eigenvalue<O: Objective>(
    objectives: &[O],
    params: &[f64],
    cfg: &SharpnessConfig,
    seed: u64,
) -> Result<SharpnessResult> {
    cfg.validate()?;
    if objectives.is_empty() {
        return Err(Error::config("sharpness needs at least one full batch"));
    }
    let start = random_unit(params.len(), &mut stream(seed, Domain::Sharpness, 0, 0));
    let run =
        |obj: &O| dominant_eigenvalue(obj, params, &start, cfg.max_iters, cfg.tol, cfg.hvp_eps);
    #[cfg(feature = "parallel")]
    let results: Vec<Result<PowerIteration>> = objectives.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<PowerIteration>> = objectives.iter().map(run).collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let per_batch: Vec<f64> = results.iter().map(|r| r.eigenvalue).collect();
    Ok(SharpnessResult {
        median_eigenvalue: median_lower(&per_batch).expect("non-empty"),
        per_batch_eigenvalues: per_batch,
        iterations_used: results.iter().map(|r| r.iterations).collect(),
        converged_flags: results.iter().map(|r| r.converged).collect(),
    })
}

/// Median dominant Hessian eigenvalue over the consecutive full batches of
/// `dataset` (a trailing partial batch is dropped).
pub fn sharpness_metric(
    arch: &MlpArchitecture,
    params: &ParamVector,
    dataset: &Batch,
    batch_size: usize,
    cfg: &SharpnessConfig,
    seed: u64,
) -> Result<SharpnessResult> {
    if batch_size == 0 {
        return Err(Error::config("sharpness batch size must be >= 1"));
    }
    let full = dataset.len() / batch_size;
    if full == 0 {
        return Err(Error::config(format!(
            "sharpness needs at least one full batch of {batch_size}, dataset has {}",
            dataset.len()
        )));
    }
    let batches = (0..full)
        .map(|b| dataset.slice(b * batch_size, (b + 1) * batch_size))
        .collect::<Result<Vec<_>>>()?;
    let objectives: Vec<BatchObjective<'_>> = batches
        .iter()
        .map(|b| BatchObjective::new(arch, b))
        .collect();
    params.expect_len("sharpness parameters", arch.param_count())?;
    median_dominant_eigenvalue(&objectives, params, cfg, seed)
}
