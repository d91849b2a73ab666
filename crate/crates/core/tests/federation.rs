use fedsoup_core::config::parse_config_str;
use fedsoup_core::data::{generate_federation, ShiftSpec};
use fedsoup_core::engine::{run_training, FederatedConfig, Method};
use fedsoup_core::eval::evaluate_federation;
use fedsoup_core::metrics::accuracy;
use fedsoup_core::nn::{Activation, MlpArchitecture};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const FIXTURE: &str = include_str!("../../../configs/acceptance.json");

fn arch() -> MlpArchitecture {
    MlpArchitecture::new(vec![2, 16, 2], Activation::Tanh).unwrap()
}

/// Mean accuracy over seeds of a model trained only on client 0, evaluated on
/// every client's local test split.
fn client0_transfer(spec: &ShiftSpec) -> Vec<f64> {
    let mut totals = vec![0.0; spec.n_clients];
    for seed in SEEDS {
        let fed = generate_federation(spec, None, seed).unwrap();
        let cfg = FederatedConfig {
            rounds: 30,
            seed,
            ..FederatedConfig::default().with_method(Method::LocalOnly)
        };
        let out = run_training(&fed, &arch(), &cfg).unwrap();
        let model = &out.states[0].local_params;
        for (t, c) in totals.iter_mut().zip(&fed.clients) {
            *t += accuracy(&arch(), model, &c.local_test).unwrap();
        }
    }
    totals.iter().map(|t| t / SEEDS.len() as f64).collect()
}

#[test]
fn homogeneous_clients_are_interchangeable() {
    let spec = ShiftSpec::new(4, 1000).homogeneous();
    let acc = client0_transfer(&spec);
    for a in &acc[1..] {
        assert!((a - acc[0]).abs() <= 0.03, "{acc:?}");
    }
}

#[test]
fn rotation_alone_hurts_transfer() {
    let spec = ShiftSpec {
        rotation_step: 0.5,
        mean_shift_step: 0.0,
        ..ShiftSpec::new(4, 200)
    };
    let acc = client0_transfer(&spec);
    assert!(acc[0] - acc[3] > 0.05, "{acc:?}");
}

#[test]
fn fixture_run_fills_soups_and_reports_consistently() {
    let mut spec = parse_config_str(FIXTURE).unwrap();
    for seed in SEEDS {
        spec.training.seed = seed;
        let cfg = spec.training_for(Method::FedSoup);
        let fed = generate_federation(&spec.data, None, seed).unwrap();
        let out = run_training(&fed, &spec.model, &cfg).unwrap();
        assert_eq!(out.records.len(), 200);
        assert!(out.states.iter().any(|s| !s.soup.is_empty()));
        let start = cfg.interpolation_start_round();
        for s in &out.states {
            assert!(s.soup.rounds().iter().all(|&r| r >= start));
        }
        for r in &out.records[..start] {
            assert!(r.soup_sizes.iter().all(|&n| n == 0));
            assert!(r.selections.iter().all(Option::is_none));
        }
        let report = evaluate_federation(&out, &fed, &spec.model, &cfg).unwrap();
        assert!(report.is_consistent());
        assert_eq!(report.clients.len(), 4);
        assert!(report.mean_local_auc.is_some() && report.mean_global_auc.is_some());
    }
}

#[test]
fn fedavg_clients_share_global_metrics_on_fixture() {
    let spec = parse_config_str(FIXTURE).unwrap();
    let cfg = spec.training_for(Method::FedAvg);
    let fed = generate_federation(&spec.data, None, cfg.seed).unwrap();
    let out = run_training(&fed, &spec.model, &cfg).unwrap();
    let report = evaluate_federation(&out, &fed, &spec.model, &cfg).unwrap();
    let first = &report.clients[0];
    for c in &report.clients {
        assert_eq!(c.global_accuracy, first.global_accuracy);
        assert_eq!(c.global_auc, first.global_auc);
    }
}
