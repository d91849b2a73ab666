//! Local, global and unseen-domain evaluation, the fine-tuning trade-off
//! sweep, and per-client sharpness.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_federation, FederationData, ShiftSpec};
use crate::engine::{fine_tune, run_training, FederatedConfig, Method, TrainingOutcome};
use crate::error::{Error, Result};
use crate::metrics::accuracy_and_auc;
use crate::nn::{Batch, MlpArchitecture, ParamVector};
use crate::rng::{derive_key, Domain};
use crate::sharpness::{sharpness_metric, SharpnessResult};

pub use crate::metrics::{accuracy, auc_binary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub local_accuracy: f64,
    pub local_auc: Option<f64>,
    pub global_accuracy: f64,
    pub global_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub fine_tune_iters: usize,
    pub mean_local_accuracy: f64,
    pub mean_global_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSharpness {
    pub client_id: usize,
    pub fine_tune_iters: usize,
    pub result: SharpnessResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooRow {
    pub holdout: usize,
    /// Mean over the participants' evaluated models (personalized where the
    /// method personalizes).
    pub unseen_accuracy: f64,
    pub unseen_auc: Option<f64>,
    /// The final aggregated model alone.
    pub global_model_accuracy: f64,
    pub global_model_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub method: Method,
    pub seed: u64,
    pub rows: Vec<LooRow>,
    pub mean_unseen_accuracy: f64,
    pub mean_unseen_auc: Option<f64>,
    pub mean_global_model_accuracy: f64,
    pub mean_global_model_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub clients: Vec<ClientMetrics>,
    pub mean_local_accuracy: f64,
    pub mean_local_auc: Option<f64>,
    pub mean_global_accuracy: f64,
    pub mean_global_auc: Option<f64>,
    /// Rounds of the global checkpoints in each client's soup.
    pub soup_rounds: Vec<Vec<usize>>,
    pub tradeoff: Vec<TradeoffRow>,
    pub sharpness: Option<Vec<ClientSharpness>>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut total = 0.0;
    for v in values {
        total += v;
        n += 1;
    }
    total / n as f64
}

/// Mean when every entry is present.
fn mean_opt(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let all: Option<Vec<f64>> = values.into_iter().collect();
    all.filter(|v| !v.is_empty()).map(mean)
}

impl MetricsReport {
    /// Recomputes every aggregate from the per-client rows and compares.
    pub fn is_consistent(&self) -> bool {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let rows_ok = self.clients.iter().all(|c| {
            in_unit(c.local_accuracy)
                && in_unit(c.global_accuracy)
                && c.local_auc.is_none_or(in_unit)
                && c.global_auc.is_none_or(in_unit)
        });
        rows_ok
            && self.mean_local_accuracy == mean(self.clients.iter().map(|c| c.local_accuracy))
            && self.mean_global_accuracy == mean(self.clients.iter().map(|c| c.global_accuracy))
            && self.mean_local_auc == mean_opt(self.clients.iter().map(|c| c.local_auc))
            && self.mean_global_auc == mean_opt(self.clients.iter().map(|c| c.global_auc))
    }
}

fn map_clients<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let out: Vec<Result<T>> = (0..n).into_par_iter().map(f).collect();
    #[cfg(not(feature = "parallel"))]
    let out: Vec<Result<T>> = (0..n).map(f).collect();
    out.into_iter().collect()
}

/// Local metrics on each client's local test split and global metrics on
/// the shared global test set, one model per client.
pub fn evaluate_models(
    models: &[ParamVector],
    fed: &FederationData,
    arch: &MlpArchitecture,
) -> Result<Vec<ClientMetrics>> {
    if models.len() != fed.clients.len() {
        return Err(Error::dim("client models", fed.clients.len(), models.len()));
    }
    map_clients(models.len(), |i| {
        let client = &fed.clients[i];
        let (local_accuracy, local_auc) = accuracy_and_auc(arch, &models[i], &client.local_test)?;
        let (global_accuracy, global_auc) = accuracy_and_auc(arch, &models[i], &fed.global_test)?;
        Ok(ClientMetrics {
            client_id: client.client_id,
            local_accuracy,
            local_auc,
            global_accuracy,
            global_auc,
        })
    })
}

fn report_from_clients(
    method: Method,
    seed: u64,
    clients: Vec<ClientMetrics>,
    soup_rounds: Vec<Vec<usize>>,
) -> MetricsReport {
    MetricsReport {
        method,
        seeds: vec![seed],
        mean_local_accuracy: mean(clients.iter().map(|c| c.local_accuracy)),
        mean_local_auc: mean_opt(clients.iter().map(|c| c.local_auc)),
        mean_global_accuracy: mean(clients.iter().map(|c| c.global_accuracy)),
        mean_global_auc: mean_opt(clients.iter().map(|c| c.global_auc)),
        clients,
        soup_rounds,
        tradeoff: Vec::new(),
        sharpness: None,
    }
}

/// Evaluates every client's final model (personalized, or the shared global
/// model for FedAvg/FedProx) locally and globally, then averages.
pub fn evaluate_federation(
    outcome: &TrainingOutcome,
    fed: &FederationData,
    arch: &MlpArchitecture,
    cfg: &FederatedConfig,
) -> Result<MetricsReport> {
    let clients = evaluate_models(&outcome.client_models(), fed, arch)?;
    let soups = outcome.states.iter().map(|s| s.soup.rounds()).collect();
    Ok(report_from_clients(
        outcome.method,
        cfg.seed,
        clients,
        soups,
    ))
}

/// Fine-tunes copies of each client's model for every count in
/// `cfg.fine_tune_iters` and reports mean local and global accuracy.
pub fn tradeoff_sweep(
    outcome: &TrainingOutcome,
    fed: &FederationData,
    arch: &MlpArchitecture,
    cfg: &FederatedConfig,
) -> Result<Vec<TradeoffRow>> {
    if cfg.fine_tune_iters.is_empty() {
        return Err(Error::config("training.fine_tune_iters must not be empty"));
    }
    let models = outcome.client_models();
    cfg.fine_tune_iters
        .iter()
        .map(|&iters| {
            let tuned = map_clients(models.len(), |i| {
                fine_tune(&models[i], &fed.clients[i], iters, arch, cfg)
            })?;
            let m = evaluate_models(&tuned, fed, arch)?;
            Ok(TradeoffRow {
                fine_tune_iters: iters,
                mean_local_accuracy: mean(m.iter().map(|c| c.local_accuracy)),
                mean_global_accuracy: mean(m.iter().map(|c| c.global_accuracy)),
            })
        })
        .collect()
}

/// Sharpness of each client's model (after `fine_tune_iters` epochs of
/// local fine-tuning) over its own training split.
pub fn client_sharpness(
    outcome: &TrainingOutcome,
    fed: &FederationData,
    arch: &MlpArchitecture,
    cfg: &FederatedConfig,
    fine_tune_iters: usize,
) -> Result<Vec<ClientSharpness>> {
    let models = outcome.client_models();
    let batch_size = cfg.sharpness.batch_size.unwrap_or(cfg.batch_size);
    map_clients(models.len(), |i| {
        let client = &fed.clients[i];
        let params = fine_tune(&models[i], client, fine_tune_iters, arch, cfg)?;
        let seed = derive_key(cfg.seed, Domain::Sharpness, client.client_id as u64, 0);
        let result = sharpness_metric(
            arch,
            &params,
            &client.train,
            batch_size,
            &cfg.sharpness,
            seed,
        )?;
        Ok(ClientSharpness {
            client_id: client.client_id,
            fine_tune_iters,
            result,
        })
    })
}

fn evaluate_unseen(
    models: &[ParamVector],
    global: &ParamVector,
    pool: &Batch,
    arch: &MlpArchitecture,
) -> Result<LooRow> {
    let per_model = models
        .iter()
        .map(|m| accuracy_and_auc(arch, m, pool))
        .collect::<Result<Vec<_>>>()?;
    let (global_model_accuracy, global_model_auc) = accuracy_and_auc(arch, global, pool)?;
    Ok(LooRow {
        holdout: 0,
        unseen_accuracy: mean(per_model.iter().map(|p| p.0)),
        unseen_auc: mean_opt(per_model.iter().map(|p| p.1)),
        global_model_accuracy,
        global_model_auc,
    })
}

/// Leave-one-client-out: for each client, regenerate the federation with
/// that client held out, train on the rest, and evaluate on the held-out
/// client's full pool.
pub fn leave_one_out_run(
    spec: &ShiftSpec,
    arch: &MlpArchitecture,
    cfg: &FederatedConfig,
) -> Result<LooReport> {
    if spec.n_clients < 3 {
        return Err(Error::config("leave-one-out needs data.n_clients >= 3"));
    }
    let rows = map_clients(spec.n_clients, |h| {
        let fed = generate_federation(spec, Some(h), cfg.seed)?;
        let outcome = run_training(&fed, arch, cfg)?;
        let unseen = fed.unseen_client.as_ref().expect("holdout requested");
        let pool = unseen.full_pool()?;
        let mut row = evaluate_unseen(&outcome.client_models(), &outcome.global, &pool, arch)?;
        row.holdout = h;
        Ok(row)
    })?;
    Ok(LooReport {
        method: cfg.method,
        seed: cfg.seed,
        mean_unseen_accuracy: mean(rows.iter().map(|r| r.unseen_accuracy)),
        mean_unseen_auc: mean_opt(rows.iter().map(|r| r.unseen_auc)),
        mean_global_model_accuracy: mean(rows.iter().map(|r| r.global_model_accuracy)),
        mean_global_model_auc: mean_opt(rows.iter().map(|r| r.global_model_auc)),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClientDataset;
    use crate::nn::Activation;

    fn small() -> (FederationData, MlpArchitecture, FederatedConfig) {
        let fed = generate_federation(&ShiftSpec::new(3, 64), None, 2).unwrap();
        let arch = MlpArchitecture::new(vec![2, 8, 2], Activation::Tanh).unwrap();
        let cfg = FederatedConfig {
            rounds: 8,
            seed: 2,
            fine_tune_iters: vec![0, 2],
            ..FederatedConfig::default()
        };
        (fed, arch, cfg)
    }

    #[test]
    fn shared_model_gives_equal_global_metrics() {
        let (fed, arch, cfg) = small();
        let out = run_training(&fed, &arch, &cfg).unwrap();
        let rep = evaluate_federation(&out, &fed, &arch, &cfg).unwrap();
        assert!(rep.is_consistent());
        let g = rep.clients[0].global_accuracy;
        assert!(rep.clients.iter().all(|c| c.global_accuracy == g));
        assert_eq!(rep.clients.len(), 3);
    }

    #[test]
    fn degenerate_single_test_set() {
        let (fed, arch, cfg) = small();
        let c0 = fed.clients[0].clone();
        let single = FederationData::from_parts(
            fed.spec.clone(),
            vec![ClientDataset { ..c0.clone() }],
            c0.local_test.clone(),
        );
        let model = arch.init_params(&mut crate::rng::stream(1, Domain::Init, 0, 0));
        let m = evaluate_models(&[model], &single, &arch).unwrap();
        assert_eq!(m[0].local_accuracy, m[0].global_accuracy);
        assert_eq!(m[0].local_auc, m[0].global_auc);
        let _ = cfg;
    }

    #[test]
    fn sweep_with_zero_iters_reproduces_evaluation() {
        let (fed, arch, cfg) = small();
        let out = run_training(&fed, &arch, &cfg.with_method(Method::FedSoup)).unwrap();
        let rep = evaluate_federation(&out, &fed, &arch, &cfg).unwrap();
        let rows = tradeoff_sweep(&out, &fed, &arch, &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean_local_accuracy, rep.mean_local_accuracy);
        assert_eq!(rows[0].mean_global_accuracy, rep.mean_global_accuracy);
        // the sweep must not mutate stored states
        assert_eq!(
            out,
            run_training(&fed, &arch, &cfg.with_method(Method::FedSoup)).unwrap()
        );
        let empty = FederatedConfig {
            fine_tune_iters: vec![],
            ..cfg.clone()
        };
        assert!(tradeoff_sweep(&out, &fed, &arch, &empty).is_err());
    }

    #[test]
    fn loo_produces_one_row_per_client() {
        let (_, arch, cfg) = small();
        let spec = ShiftSpec::new(4, 48);
        let rep = leave_one_out_run(
            &spec,
            &arch,
            &FederatedConfig {
                rounds: 3,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(
            rep.rows.iter().map(|r| r.holdout).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        let m = mean(rep.rows.iter().map(|r| r.unseen_accuracy));
        assert_eq!(m, rep.mean_unseen_accuracy);
        // shared-model methods report the same number both ways
        for r in &rep.rows {
            assert_eq!(r.unseen_accuracy, r.global_model_accuracy);
        }
        assert!(leave_one_out_run(&ShiftSpec::new(2, 48), &arch, &cfg).is_err());
    }
}
