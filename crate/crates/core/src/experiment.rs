//! Subcommand drivers shared by the command-line tool and tests.

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::config::ExperimentSpec;
use crate::data::{generate_federation, FederationData, FederationExport};
use crate::engine::{run_training, Method, RoundRecord, TrainingOutcome};
use crate::error::Result;
use crate::eval::{
    client_sharpness, evaluate_federation, leave_one_out_run, tradeoff_sweep, LooReport,
    MetricsReport,
};
use crate::report::{
    write_loo, write_sharpness, write_table1, write_trace, write_tradeoff, CanonicalReport,
    Envelope, Report, VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Run,
    /// Sharpness of each client's model after `fine_tune` epochs of local fine-tuning.
    Sharpness {
        fine_tune: usize,
    },
    Tradeoff,
    Loo,
    ExportData,
}

impl Command {
    pub fn label(self) -> String {
        match self {
            Command::Run => "run".into(),
            Command::Sharpness { fine_tune } => format!("sharpness --fine-tune {fine_tune}"),
            Command::Tradeoff => "tradeoff".into(),
            Command::Loo => "loo".into(),
            Command::ExportData => "export-data".into(),
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trace: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn apply_overrides(mut spec: ExperimentSpec, o: &Overrides) -> ExperimentSpec {
    if let Some(seed) = o.seed {
        spec.training.seed = seed;
    }
    if let Some(dir) = &o.out_dir {
        spec.outputs.dir = dir.clone();
    }
    if let Some(trace) = &o.trace {
        spec.outputs.trace = Some(trace.clone());
    }
    spec
}

pub fn federation(spec: &ExperimentSpec) -> Result<FederationData> {
    generate_federation(&spec.data, None, spec.training.seed)
}

fn per_method<T, F>(methods: &[Method], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Method) -> Result<T> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    let out: Vec<Result<T>> = methods.par_iter().map(|&m| f(m)).collect();
    #[cfg(not(feature = "parallel"))]
    let out: Vec<Result<T>> = methods.iter().map(|&m| f(m)).collect();
    out.into_iter().collect()
}

/// Results of one command before anything is written.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub canonical: CanonicalReport,
    pub traces: Vec<(Method, Vec<RoundRecord>)>,
    pub federation: Option<FederationExport>,
}

fn evaluate_method(
    spec: &ExperimentSpec,
    fed: &FederationData,
    method: Method,
    command: Command,
) -> Result<(MetricsReport, TrainingOutcome)> {
    let cfg = spec.training_for(method);
    let outcome = run_training(fed, &spec.model, &cfg)?;
    let mut report = evaluate_federation(&outcome, fed, &spec.model, &cfg)?;
    match command {
        Command::Tradeoff => report.tradeoff = tradeoff_sweep(&outcome, fed, &spec.model, &cfg)?,
        Command::Sharpness { fine_tune } => {
            report.sharpness = Some(client_sharpness(
                &outcome,
                fed,
                &spec.model,
                &cfg,
                fine_tune,
            )?)
        }
        _ => {}
    }
    Ok((report, outcome))
}

/// Computes a command's results in memory.
pub fn compute(spec: &ExperimentSpec, command: Command) -> Result<Outcome> {
    spec.validate()?;
    let mut canonical = CanonicalReport {
        command: command.label(),
        version: VERSION.to_string(),
        spec: spec.clone(),
        methods: Vec::new(),
        loo: Vec::new(),
    };
    let mut traces = Vec::new();
    let mut export = None;
    match command {
        Command::ExportData => export = Some(FederationExport::new(&federation(spec)?)),
        Command::Loo => {
            canonical.loo = per_method(&spec.methods, |m| -> Result<LooReport> {
                leave_one_out_run(&spec.data, &spec.model, &spec.training_for(m))
            })?;
        }
        _ => {
            let fed = federation(spec)?;
            let results = per_method(&spec.methods, |m| evaluate_method(spec, &fed, m, command))?;
            for (report, outcome) in results {
                traces.push((report.method, outcome.records));
                canonical.methods.push(report);
            }
        }
    }
    Ok(Outcome {
        canonical,
        traces,
        federation: export,
    })
}

fn create(path: &std::path::Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Runs a command and writes its files under `spec.outputs.dir`.
pub fn execute(spec: &ExperimentSpec, command: Command) -> Result<Report> {
    let started = Instant::now();
    spec.validate()?;
    let out = &spec.outputs;
    std::fs::create_dir_all(&out.dir)?;
    let result = compute(spec, command)?;
    let c = &result.canonical;
    match command {
        Command::Run => write_table1(create(&out.table1())?, &c.methods)?,
        Command::Tradeoff => {
            write_table1(create(&out.table1())?, &c.methods)?;
            write_tradeoff(create(&out.tradeoff())?, &c.methods)?;
        }
        Command::Sharpness { .. } => write_sharpness(create(&out.sharpness())?, &c.methods)?,
        Command::Loo => write_loo(create(&out.loo())?, &c.loo)?,
        Command::ExportData => {
            let fed = result.federation.as_ref().expect("export computed");
            let mut w = create(&out.federation())?;
            serde_json::to_writer_pretty(&mut w, fed)?;
            std::io::Write::flush(&mut w)?;
        }
    }
    if let Some(path) = out.trace_path() {
        if !result.traces.is_empty() {
            write_trace(create(&path)?, &result.traces)?;
        }
    }
    let report = Report {
        canonical: result.canonical,
        envelope: Envelope {
            generated_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            duration_ms: started.elapsed().as_millis(),
        },
    };
    report.write(&out.report())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn tiny(dir: &std::path::Path) -> ExperimentSpec {
        let mut spec = parse_config_str(
            r#"{
                "data": {"n_clients": 3, "samples_per_client": 48},
                "model": {"layer_sizes": [2, 4, 2]},
                "training": {"rounds": 4, "fine_tune_iters": [0, 1]},
                "methods": ["fedavg", "fedsoup"]
            }"#,
        )
        .unwrap();
        spec.outputs.dir = dir.to_path_buf();
        spec
    }

    #[test]
    fn canonical_body_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny(dir.path());
        let a = compute(&spec, Command::Tradeoff)
            .unwrap()
            .canonical
            .to_json()
            .unwrap();
        let b = compute(&spec, Command::Tradeoff)
            .unwrap()
            .canonical
            .to_json()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn execute_writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny(dir.path());
        spec.outputs.trace = Some("trace.jsonl".into());
        let report = execute(&spec, Command::Run).unwrap();
        assert_eq!(report.canonical.methods.len(), 2);
        let table = std::fs::read_to_string(spec.outputs.table1()).unwrap();
        assert_eq!(table.lines().count(), 3);
        let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
        assert_eq!(trace.lines().count(), 8);
        let parsed: Report =
            serde_json::from_str(&std::fs::read_to_string(spec.outputs.report()).unwrap()).unwrap();
        assert_eq!(parsed.canonical, report.canonical);
    }

    #[test]
    fn overrides_apply() {
        let dir = tempfile::tempdir().unwrap();
        let spec = apply_overrides(
            tiny(dir.path()),
            &Overrides {
                seed: Some(9),
                trace: Some("t.jsonl".into()),
                out_dir: None,
            },
        );
        assert_eq!(spec.training.seed, 9);
        assert_eq!(
            spec.outputs.trace_path().unwrap(),
            dir.path().join("t.jsonl")
        );
    }
}
