//! Browser bindings. Every entry point takes an experiment config as a JSON
//! string (the same format the command-line tool reads) and returns JSON.

use fedsoup_core::config::{parse_config_str, ExperimentSpec};
use fedsoup_core::engine::{run_training, Method};
use fedsoup_core::eval::{client_sharpness, evaluate_federation, tradeoff_sweep, MetricsReport};
use fedsoup_core::experiment::federation;
use fedsoup_core::nn::{forward, Batch, MlpArchitecture, ParamVector};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const GRID: usize = 48;

#[derive(Serialize)]
struct ClientPreview {
    client_id: usize,
    rotation: f64,
    offset: Vec<f64>,
    /// `[x0, x1, label]` for every pooled sample.
    points: Vec<[f64; 3]>,
}

#[derive(Serialize)]
struct Preview {
    clients: Vec<ClientPreview>,
    global_test_size: usize,
    bounds: [f64; 4],
}

#[derive(Serialize)]
struct Surface {
    bounds: [f64; 4],
    size: usize,
    /// Class-1 probability of client 0's model, row-major from the top-left.
    probability: Vec<f64>,
}

#[derive(Serialize)]
struct MethodRun {
    report: MetricsReport,
    /// Mean client validation accuracy per round.
    curve: Vec<f64>,
    surface: Surface,
}

#[derive(Serialize)]
struct SharpnessRow {
    method: Method,
    client: usize,
    median_eigenvalue: f64,
}

fn spec_from(config: &str) -> Result<ExperimentSpec, String> {
    parse_config_str(config).map_err(|e| e.to_string())
}

fn bounds_of(points: impl Iterator<Item = [f64; 2]>) -> [f64; 4] {
    let mut b = [
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    ];
    for [x, y] in points {
        b[0] = b[0].min(x);
        b[1] = b[1].max(x);
        b[2] = b[2].min(y);
        b[3] = b[3].max(y);
    }
    let pad = 0.05 * (b[1] - b[0]).max(b[3] - b[2]);
    [b[0] - pad, b[1] + pad, b[2] - pad, b[3] + pad]
}

fn preview_json(config: &str) -> Result<String, String> {
    let spec = spec_from(config)?;
    let fed = federation(&spec).map_err(|e| e.to_string())?;
    let mut clients = Vec::new();
    for c in &fed.clients {
        let pool = c.full_pool().map_err(|e| e.to_string())?;
        clients.push(ClientPreview {
            client_id: c.client_id,
            rotation: c.source.rotation,
            offset: c.source.mean_offset.clone(),
            points: pool.rows().map(|(x, y)| [x[0], x[1], y as f64]).collect(),
        });
    }
    let bounds = bounds_of(
        clients
            .iter()
            .flat_map(|c| c.points.iter().map(|p| [p[0], p[1]])),
    );
    serde_json::to_string(&Preview {
        clients,
        global_test_size: fed.global_test.len(),
        bounds,
    })
    .map_err(|e| e.to_string())
}

/// Probability surface over the first two inputs; other inputs are held at 0.
fn surface(
    arch: &MlpArchitecture,
    params: &ParamVector,
    bounds: [f64; 4],
) -> Result<Surface, String> {
    let d = arch.input_dim();
    let mut features = Vec::with_capacity(GRID * GRID * d);
    for r in 0..GRID {
        let y = bounds[3] - (bounds[3] - bounds[2]) * (r as f64 + 0.5) / GRID as f64;
        for c in 0..GRID {
            let x = bounds[0] + (bounds[1] - bounds[0]) * (c as f64 + 0.5) / GRID as f64;
            features.push(x);
            features.push(y);
            features.extend(std::iter::repeat_n(0.0, d - 2));
        }
    }
    let grid = Batch::new(features, d, vec![0; GRID * GRID]).map_err(|e| e.to_string())?;
    let logits = forward(arch, params, &grid).map_err(|e| e.to_string())?;
    Ok(Surface {
        bounds,
        size: GRID,
        probability: logits.probability(1),
    })
}

fn compare_json(config: &str) -> Result<String, String> {
    let spec = spec_from(config)?;
    let fed = federation(&spec).map_err(|e| e.to_string())?;
    let bounds = bounds_of(fed.clients.iter().flat_map(|c| {
        c.train
            .rows()
            .map(|(x, _)| [x[0], x[1]])
            .collect::<Vec<_>>()
    }));
    let mut runs = Vec::new();
    for &method in &spec.methods {
        let cfg = spec.training_for(method);
        let outcome = run_training(&fed, &spec.model, &cfg).map_err(|e| e.to_string())?;
        let curve = outcome
            .records
            .iter()
            .map(|r| r.val_accuracy.iter().sum::<f64>() / r.val_accuracy.len() as f64)
            .collect();
        let mut report =
            evaluate_federation(&outcome, &fed, &spec.model, &cfg).map_err(|e| e.to_string())?;
        report.tradeoff =
            tradeoff_sweep(&outcome, &fed, &spec.model, &cfg).map_err(|e| e.to_string())?;
        let model = &outcome.client_models()[0];
        runs.push(MethodRun {
            report,
            curve,
            surface: surface(&spec.model, model, bounds)?,
        });
    }
    serde_json::to_string(&runs).map_err(|e| e.to_string())
}

fn sharpness_json(config: &str, fine_tune: usize) -> Result<String, String> {
    let spec = spec_from(config)?;
    let fed = federation(&spec).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for &method in &spec.methods {
        let cfg = spec.training_for(method);
        let outcome = run_training(&fed, &spec.model, &cfg).map_err(|e| e.to_string())?;
        for c in client_sharpness(&outcome, &fed, &spec.model, &cfg, fine_tune)
            .map_err(|e| e.to_string())?
        {
            rows.push(SharpnessRow {
                method,
                client: c.client_id,
                median_eigenvalue: c.result.median_eigenvalue,
            });
        }
    }
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

/// Generated client pools for plotting.
#[wasm_bindgen]
pub fn preview_federation(config: &str) -> Result<String, JsValue> {
    preview_json(config).map_err(|e| JsValue::from_str(&e))
}

/// Trains each configured method and returns metrics, validation curves,
/// the fine-tuning sweep and client 0's decision surface.
#[wasm_bindgen]
pub fn train_and_compare(config: &str) -> Result<String, JsValue> {
    compare_json(config).map_err(|e| JsValue::from_str(&e))
}

/// Median dominant Hessian eigenvalue per method and client.
#[wasm_bindgen]
pub fn compare_sharpness(config: &str, fine_tune: usize) -> Result<String, JsValue> {
    sharpness_json(config, fine_tune).map_err(|e| JsValue::from_str(&e))
}
