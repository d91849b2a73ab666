//! Communication rounds: client updates, server aggregation, and the
//! FedSoup selection/patching step on the client side.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, FederationData};
use crate::error::{Error, Result};
use crate::nn::{
    train_local, LocalSchedule, MlpArchitecture, OptimizerConfig, OptimizerKind, OptimizerState,
    ParamVector, Proximal,
};
use crate::rng::{stream, Domain};
use crate::sharpness::SharpnessConfig;
use crate::soup::{maybe_select, patch, val_acc, Selection, SelectionMode, SoupSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Method {
    #[default]
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fedprox")]
    FedProx,
    #[serde(rename = "fedsoup")]
    FedSoup,
    #[serde(rename = "local_only")]
    LocalOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::FedAvg,
        Method::FedProx,
        Method::FedSoup,
        Method::LocalOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedSoup => "fedsoup",
            Method::LocalOnly => "local_only",
        }
    }

    /// Whether each client ends with its own model rather than the shared global one.
    pub fn is_personalized(self) -> bool {
        matches!(self, Method::FedSoup | Method::LocalOnly)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

fn default_rounds() -> usize {
    200
}
fn default_local_epochs() -> usize {
    1
}
fn default_batch_size() -> usize {
    16
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.99
}
fn default_mu() -> f64 {
    0.01
}
fn default_start_fraction() -> f64 {
    0.75
}
fn default_fine_tune_iters() -> Vec<usize> {
    vec![1, 7, 15]
}

/// Training hyperparameters. `method` is chosen per run and is not part of
/// the serialized form; experiment files list methods separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedConfig {
    #[serde(skip)]
    pub method: Method,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_mu")]
    pub fedprox_mu: f64,
    #[serde(default = "default_start_fraction")]
    pub interpolation_start_fraction: f64,
    #[serde(default)]
    pub soup_mode: SelectionMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_fine_tune_iters")]
    pub fine_tune_iters: Vec<usize>,
    #[serde(default)]
    pub sharpness: SharpnessConfig,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            method: Method::FedAvg,
            rounds: default_rounds(),
            local_epochs: default_local_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            optimizer: OptimizerKind::Adam,
            beta1: default_beta1(),
            beta2: default_beta2(),
            fedprox_mu: default_mu(),
            interpolation_start_fraction: default_start_fraction(),
            soup_mode: SelectionMode::Accumulate,
            seed: 0,
            fine_tune_iters: default_fine_tune_iters(),
            sharpness: SharpnessConfig::default(),
        }
    }
}

impl FederatedConfig {
    pub fn with_method(&self, method: Method) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..OptimizerConfig::default()
        }
    }

    pub fn schedule(&self) -> LocalSchedule {
        LocalSchedule {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
        }
    }

    /// First round index at which selection and patching run.
    pub fn interpolation_start_round(&self) -> usize {
        (self.interpolation_start_fraction * self.rounds as f64).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("training.rounds must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("training.learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.interpolation_start_fraction) {
            return Err(Error::config(
                "training.interpolation_start_fraction must lie in [0, 1]",
            ));
        }
        if self.method == Method::FedSoup
            && self.interpolation_start_fraction * (self.rounds as f64) < 1.0
        {
            return Err(Error::config(
                "training.interpolation_start_fraction * rounds must be >= 1 for fedsoup",
            ));
        }
        if !(self.fedprox_mu >= 0.0 && self.fedprox_mu.is_finite()) {
            return Err(Error::config("training.fedprox_mu must be non-negative"));
        }
        OptimizerState::new(self.optimizer_config(), 1)?;
        self.sharpness.validate()?;
        Ok(())
    }
}

/// One federation participant.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub local_params: ParamVector,
    pub soup: SoupSet,
    pub optimizer: OptimizerState,
}

/// Per-round trace entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Validation accuracy of each client's model at the end of the round.
    pub val_accuracy: Vec<f64>,
    pub soup_sizes: Vec<usize>,
    /// Selection test outcome per client, when one ran this round.
    pub selections: Vec<Option<Selection>>,
    /// Fingerprint of the aggregated model, hex FNV-1a of the f64 bits.
    pub global_checksum: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub method: Method,
    pub states: Vec<ClientState>,
    pub global: ParamVector,
    pub records: Vec<RoundRecord>,
}

impl TrainingOutcome {
    /// The model each client is evaluated with: its own for personalized
    /// methods, the shared global model otherwise.
    pub fn client_models(&self) -> Vec<ParamVector> {
        self.states
            .iter()
            .map(|s| {
                if self.method.is_personalized() {
                    s.local_params.clone()
                } else {
                    self.global.clone()
                }
            })
            .collect()
    }
}

/// Weighted mean `Σ wᵢθᵢ / Σ wᵢ`, computed relative to the first vector so
/// that identical inputs come back unchanged.
pub fn aggregate(params: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if params.len() != weights.len() {
        return Err(Error::dim(
            "aggregation weights",
            params.len(),
            weights.len(),
        ));
    }
    let first = params
        .first()
        .ok_or_else(|| Error::config("cannot aggregate zero models"))?;
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::config("aggregation weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::config("aggregation weights must not all be zero"));
    }
    let mut acc = vec![0.0; first.len()];
    for (p, w) in params.iter().zip(weights).skip(1) {
        p.expect_len("aggregation", first.len())?;
        for ((a, x), f) in acc.iter_mut().zip(p.iter()).zip(first.iter()) {
            *a += w * (x - f);
        }
    }
    ParamVector::new(first.iter().zip(&acc).map(|(f, a)| f + a / total).collect())
}

/// Local training for one client, starting from `global` (or from its own
/// parameters for local-only training). FedProx adds `μ(θ − θ_g)` to every
/// gradient.
pub fn client_update(
    state: &mut ClientState,
    data: &ClientDataset,
    global: &ParamVector,
    arch: &MlpArchitecture,
    cfg: &FederatedConfig,
    round: usize,
) -> Result<ParamVector> {
    let start = match cfg.method {
        Method::LocalOnly => state.local_params.clone(),
        _ => global.clone(),
    };
    let proximal = match cfg.method {
        Method::FedProx => Some(Proximal {
            anchor: global,
            mu: cfg.fedprox_mu,
        }),
        _ => None,
    };
    let mut rng = stream(
        cfg.seed,
        Domain::Client,
        state.client_id as u64,
        round as u64,
    );
    train_local(
        arch,
        &start,
        &data.train,
        cfg.schedule(),
        &mut state.optimizer,
        &mut rng,
        proximal,
    )
}

fn client_round(
    state: &mut ClientState,
    data: &ClientDataset,
    global: &ParamVector,
    arch: &MlpArchitecture,
    cfg: &FederatedConfig,
    round: usize,
) -> Result<(f64, Option<Selection>)> {
    let mut local = client_update(state, data, global, arch, cfg, round)?;
    let mut selection = None;
    if cfg.method == Method::FedSoup && round >= cfg.interpolation_start_round() {
        selection = Some(maybe_select(
            &mut state.soup,
            round,
            global,
            &local,
            arch,
            &data.val,
            cfg.soup_mode,
        )?);
        local = patch(&state.soup, &local)?;
    }
    state.local_params = local;
    Ok((val_acc(arch, &state.local_params, &data.val)?, selection))
}

/// Runs `cfg.rounds` communication rounds.
///
/// Every client starts from one shared initialization. In each round each
/// client trains from the current global model, FedSoup clients then select
/// and patch, and the server averages the resulting uploads with uniform
/// weights. The returned global model is the last aggregate.
pub fn run_training(
    fed: &FederationData,
    arch: &MlpArchitecture,
    cfg: &FederatedConfig,
) -> Result<TrainingOutcome> {
    run_training_traced(fed, arch, cfg, |_| Ok(()))
}

/// [`run_training`] with a callback invoked on each round record as it completes.
pub fn run_training_traced<F>(
    fed: &FederationData,
    arch: &MlpArchitecture,
    cfg: &FederatedConfig,
    mut on_round: F,
) -> Result<TrainingOutcome>
where
    F: FnMut(&RoundRecord) -> Result<()>,
{
    cfg.validate()?;
    if fed.clients.is_empty() {
        return Err(Error::config("federation has no clients"));
    }
    if fed.spec.input_dim != arch.input_dim() || fed.spec.class_count != arch.classes() {
        return Err(Error::config(
            "model.layer_sizes must start with data.input_dim and end with data.class_count",
        ));
    }
    let init = arch.init_params(&mut stream(cfg.seed, Domain::Init, 0, 0));
    let mut states = fed
        .clients
        .iter()
        .map(|c| {
            Ok(ClientState {
                client_id: c.client_id,
                local_params: init.clone(),
                soup: SoupSet::new(),
                optimizer: OptimizerState::new(cfg.optimizer_config(), arch.param_count())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = vec![1.0; states.len()];
    let mut global = init;
    let mut records = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let results: Vec<Result<(f64, Option<Selection>)>> = {
            let work = |(state, data): (&mut ClientState, &ClientDataset)| {
                client_round(state, data, &global, arch, cfg, round)
            };
            #[cfg(feature = "parallel")]
            {
                states
                    .par_iter_mut()
                    .zip(fed.clients.par_iter())
                    .map(work)
                    .collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                states
                    .iter_mut()
                    .zip(fed.clients.iter())
                    .map(work)
                    .collect()
            }
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        let uploads: Vec<ParamVector> = states.iter().map(|s| s.local_params.clone()).collect();
        global = aggregate(&uploads, &weights)?;

        let record = RoundRecord {
            round,
            val_accuracy: results.iter().map(|r| r.0).collect(),
            soup_sizes: states.iter().map(|s| s.soup.len()).collect(),
            selections: results.iter().map(|r| r.1).collect(),
            global_checksum: format!("{:016x}", global.checksum()),
        };
        on_round(&record)?;
        records.push(record);
    }

    Ok(TrainingOutcome {
        method: cfg.method,
        states,
        global,
        records,
    })
}

/// `iters` epochs of local training on the client's train split with a
/// fresh optimizer. Zero iterations returns `params` unchanged.
pub fn fine_tune(
    params: &ParamVector,
    client: &ClientDataset,
    iters: usize,
    arch: &MlpArchitecture,
    cfg: &FederatedConfig,
) -> Result<ParamVector> {
    let mut opt = OptimizerState::new(cfg.optimizer_config(), arch.param_count())?;
    let mut rng = stream(cfg.seed, Domain::FineTune, client.client_id as u64, 0);
    let schedule = LocalSchedule {
        epochs: iters,
        batch_size: cfg.batch_size,
    };
    train_local(
        arch,
        params,
        &client.train,
        schedule,
        &mut opt,
        &mut rng,
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_federation, ShiftSpec};
    use crate::nn::Activation;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let x = pv(&[0.1, -0.7, 3.3]);
        assert_eq!(aggregate(&[x.clone(), x.clone()], &[0.3, 5.1]).unwrap(), x);
        assert_eq!(
            aggregate(&[pv(&[0.0, 0.0]), pv(&[2.0, 2.0])], &[1.0, 1.0]).unwrap(),
            pv(&[1.0, 1.0])
        );
        assert_eq!(
            aggregate(&[pv(&[0.0]), pv(&[4.0])], &[1.0, 3.0]).unwrap(),
            pv(&[3.0])
        );
        assert!(aggregate(&[pv(&[0.0]), pv(&[4.0, 1.0])], &[1.0, 1.0]).is_err());
        assert!(aggregate(&[pv(&[0.0])], &[0.0]).is_err());
        assert!(aggregate(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_is_linear(
            vs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..6),
            ws in prop::collection::vec(0.1f64..5.0, 6),
            k in -4i32..5,
            c in -3.0f64..3.0,
        ) {
            let params: Vec<ParamVector> = vs.iter().map(|v| pv(v)).collect();
            let w = &ws[..params.len()];
            let base = aggregate(&params, w).unwrap();
            // Powers of two scale exactly.
            let p2 = 2f64.powi(k);
            let scaled: Vec<ParamVector> = params.iter().map(|p| p.scaled(p2).unwrap()).collect();
            prop_assert_eq!(aggregate(&scaled, w).unwrap(), base.scaled(p2).unwrap());
            let scaled: Vec<ParamVector> = params.iter().map(|p| p.scaled(c).unwrap()).collect();
            let got = aggregate(&scaled, w).unwrap();
            for (g, b) in got.iter().zip(base.iter()) {
                prop_assert!((g - c * b).abs() < 1e-12);
            }
        }
    }

    fn small_setup() -> (FederationData, MlpArchitecture, FederatedConfig) {
        let fed = generate_federation(&ShiftSpec::new(3, 48), None, 11).unwrap();
        let arch = MlpArchitecture::new(vec![2, 6, 2], Activation::Tanh).unwrap();
        let cfg = FederatedConfig {
            rounds: 12,
            seed: 5,
            ..FederatedConfig::default()
        };
        (fed, arch, cfg)
    }

    #[test]
    fn zero_local_epochs_returns_start() {
        let (fed, arch, mut cfg) = small_setup();
        cfg.local_epochs = 0;
        let init = arch.init_params(&mut stream(1, Domain::Init, 0, 0));
        let mut state = ClientState {
            client_id: 0,
            local_params: init.clone(),
            soup: SoupSet::new(),
            optimizer: OptimizerState::new(cfg.optimizer_config(), arch.param_count()).unwrap(),
        };
        let out = client_update(&mut state, &fed.clients[0], &init, &arch, &cfg, 0).unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn huge_proximal_weight_pins_to_global() {
        let (fed, arch, cfg) = small_setup();
        let cfg = FederatedConfig {
            fedprox_mu: 1e6,
            ..cfg.with_method(Method::FedProx)
        };
        let global = arch.init_params(&mut stream(2, Domain::Init, 0, 0));
        let mut state = ClientState {
            client_id: 1,
            local_params: global.clone(),
            soup: SoupSet::new(),
            optimizer: OptimizerState::new(cfg.optimizer_config(), arch.param_count()).unwrap(),
        };
        let out = client_update(&mut state, &fed.clients[1], &global, &arch, &cfg, 0).unwrap();
        assert!(
            out.max_abs_diff(&global) <= 1e-3,
            "{}",
            out.max_abs_diff(&global)
        );
    }

    #[test]
    fn record_per_round_and_deterministic() {
        let (fed, arch, cfg) = small_setup();
        let cfg = cfg.with_method(Method::FedSoup);
        let a = run_training(&fed, &arch, &cfg).unwrap();
        let b = run_training(&fed, &arch, &cfg).unwrap();
        assert_eq!(a.records.len(), 12);
        assert_eq!(a, b);
        // start round = ceil(0.75 * 12) = 9
        for r in &a.records {
            if r.round < 9 {
                assert!(r.soup_sizes.iter().all(|&s| s == 0));
                assert!(r.selections.iter().all(Option::is_none));
            } else {
                assert!(r.selections.iter().all(Option::is_some));
            }
        }
        for s in a.records.iter().flat_map(|r| r.selections.iter().flatten()) {
            assert_eq!(s.selected, s.with_global >= s.without_global);
        }
    }

    #[test]
    fn identical_clients_upload_identical_models() {
        let (mut fed, arch, cfg) = small_setup();
        // Same data and the same client id give every client the same shuffle stream.
        let first = fed.clients[0].clone();
        for c in fed.clients.iter_mut() {
            *c = first.clone();
        }
        let out = run_training(&fed, &arch, &cfg).unwrap();
        for s in &out.states {
            assert_eq!(s.local_params, out.global);
        }
    }

    #[test]
    fn late_soup_start_equals_fedavg() {
        let (fed, arch, cfg) = small_setup();
        let soup = FederatedConfig {
            interpolation_start_fraction: 1.0,
            ..cfg.with_method(Method::FedSoup)
        };
        let a = run_training(&fed, &arch, &cfg.with_method(Method::FedAvg)).unwrap();
        let b = run_training(&fed, &arch, &soup).unwrap();
        assert_eq!(a.global, b.global);
        assert_eq!(
            a.records
                .iter()
                .map(|r| &r.global_checksum)
                .collect::<Vec<_>>(),
            b.records
                .iter()
                .map(|r| &r.global_checksum)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_mu_fedprox_equals_fedavg() {
        let (fed, arch, cfg) = small_setup();
        let prox = FederatedConfig {
            fedprox_mu: 0.0,
            ..cfg.with_method(Method::FedProx)
        };
        let a = run_training(&fed, &arch, &cfg).unwrap();
        let b = run_training(&fed, &arch, &prox).unwrap();
        assert_eq!(a.global, b.global);
    }

    #[test]
    fn fine_tune_zero_is_identity() {
        let (fed, arch, cfg) = small_setup();
        let p = arch.init_params(&mut stream(3, Domain::Init, 0, 0));
        assert_eq!(fine_tune(&p, &fed.clients[0], 0, &arch, &cfg).unwrap(), p);
        assert_ne!(fine_tune(&p, &fed.clients[0], 1, &arch, &cfg).unwrap(), p);
    }

    #[test]
    fn config_validation() {
        let cfg = FederatedConfig {
            interpolation_start_fraction: 0.001,
            rounds: 10,
            ..FederatedConfig::default()
        };
        assert!(cfg.validate().is_ok());
        assert!(cfg.with_method(Method::FedSoup).validate().is_err());
        assert!(FederatedConfig {
            rounds: 0,
            ..FederatedConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!("local_only".parse::<Method>().unwrap(), Method::LocalOnly);
        assert!("fedsgd".parse::<Method>().is_err());
    }
}
