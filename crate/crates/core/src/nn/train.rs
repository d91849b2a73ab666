use rand::seq::SliceRandom;
use rand::Rng;

use super::mlp::{loss_and_grad, MlpArchitecture};
use super::{Batch, OptimizerState, ParamVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalSchedule {
    pub epochs: usize,
    pub batch_size: usize,
}

/// Pull toward `anchor` with strength `mu`: adds `mu·(θ − anchor)` to each gradient.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub anchor: &'a ParamVector,
    pub mu: f64,
}

/// Minibatch training: each epoch shuffles the rows (Fisher–Yates from
/// `rng`) and steps once per consecutive chunk of `batch_size` rows,
/// including a trailing partial chunk.
pub fn train_local<R: Rng + ?Sized>(
    arch: &MlpArchitecture,
    params: &ParamVector,
    data: &Batch,
    schedule: LocalSchedule,
    opt: &mut OptimizerState,
    rng: &mut R,
    proximal: Option<Proximal<'_>>,
) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    if schedule.batch_size == 0 {
        return Err(Error::config("training.batch_size must be >= 1"));
    }
    params.expect_len("training parameters", arch.param_count())?;
    if let Some(p) = proximal {
        p.anchor.expect_len("proximal anchor", arch.param_count())?;
        if !(p.mu >= 0.0 && p.mu.is_finite()) {
            return Err(Error::config("training.fedprox_mu must be non-negative"));
        }
    }
    if schedule.epochs == 0 {
        return Ok(params.clone());
    }

    let mut theta = params.as_slice().to_vec();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..schedule.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(schedule.batch_size) {
            let mini = data.gather(chunk)?;
            let (_, mut g) = loss_and_grad(arch, &theta, &mini)?;
            if let Some(p) = proximal {
                for ((gi, t), a) in g.iter_mut().zip(&theta).zip(p.anchor.iter()) {
                    *gi += p.mu * (t - a);
                }
            }
            opt.apply(&mut theta, &g)?;
        }
    }
    ParamVector::new(theta).map_err(|e| Error::Numeric(format!("local training diverged: {e}")))
}
