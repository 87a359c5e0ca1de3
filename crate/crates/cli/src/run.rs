//! `run`: schema-checked config, one report per method and seed, aggregates.
//!
//! Precedence for overridable fields is flag > file > built-in default. The
//! `trainer` block is shared; each `methods` entry is either a method name or
//! an object whose fields override the shared block (`name` labels it).
//! Relative IDX paths resolve against the config file's directory; the output
//! directory resolves against the working directory. Each run initializes
//! the model from `model.seed + seed`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use clap::Args;
use jsonschema::Validator;
use metadr_core::continual::{run_protocol, TrainError, TrainerConfig};
use metadr_core::domains::Protocol;
use metadr_core::evalx::{aggregate, render_table, RunReport};
use metadr_core::gradcore::GradError;
use metadr_core::models::ModelConfig;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::Failure;

pub const SCHEMA: &str = include_str!("../../../configs/run-config.schema.json");

#[derive(Args)]
pub struct RunArgs {
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Steps per domain for every method.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    transform_set: Option<String>,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum OutFormat {
    Json,
    Csv,
    Table,
}

fn default_formats() -> Vec<OutFormat> {
    vec![OutFormat::Json, OutFormat::Csv, OutFormat::Table]
}

#[derive(Deserialize)]
struct RunConfig {
    protocol: Protocol,
    model: ModelConfig,
    #[serde(default)]
    trainer: Map<String, Value>,
    methods: Vec<Value>,
    seeds: Vec<u64>,
    output: Option<PathBuf>,
    #[serde(default = "default_formats")]
    formats: Vec<OutFormat>,
}

struct MethodRun {
    name: String,
    config: TrainerConfig,
}

fn validator() -> &'static Validator {
    static V: OnceLock<Validator> = OnceLock::new();
    V.get_or_init(|| {
        let schema: Value = serde_json::from_str(SCHEMA).expect("schema is JSON");
        jsonschema::validator_for(&schema).expect("schema compiles")
    })
}

/// Checks `doc` against the published schema; errors list the offending paths.
pub fn check_schema(doc: &Value) -> Result<(), Failure> {
    let errors: Vec<String> = validator().iter_errors(doc).map(|e| format!("{}: {e}", e.instance_path)).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Failure::invalid(format!("config does not match the schema:\n  {}", errors.join("\n  "))))
    }
}

fn resolve_methods(cfg: &RunConfig, args: &RunArgs) -> Result<Vec<MethodRun>, Failure> {
    let mut shared = cfg.trainer.clone();
    if let Some(s) = args.steps {
        shared.insert("steps".into(), json!(s));
    }
    if let Some(b) = args.batch {
        shared.insert("batch".into(), json!(b));
    }
    if let Some(t) = &args.transform_set {
        shared.insert("transform_set".into(), json!(t));
    }
    let mut out: Vec<MethodRun> = Vec::new();
    for (i, entry) in cfg.methods.iter().enumerate() {
        let mut merged = shared.clone();
        let mut name = None;
        match entry {
            Value::String(m) => {
                merged.insert("method".into(), json!(m));
            }
            Value::Object(o) => {
                for (k, v) in o {
                    if k == "name" {
                        name = v.as_str().map(str::to_string);
                    } else if !(args_override(args, k)) {
                        merged.insert(k.clone(), v.clone());
                    }
                }
            }
            _ => return Err(Failure::invalid(format!("methods[{i}]: expected a name or an object"))),
        }
        let config: TrainerConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::invalid(format!("methods[{i}]: {e}")))?;
        config.validate().map_err(|e| Failure::invalid(format!("methods[{i}]: {e}")))?;
        let name = name.unwrap_or_else(|| config.label());
        if out.iter().any(|m| m.name == name) {
            return Err(Failure::invalid(format!("methods[{i}]: duplicate method name {name:?}; set \"name\"")));
        }
        out.push(MethodRun { name, config });
    }
    Ok(out)
}

fn args_override(args: &RunArgs, key: &str) -> bool {
    match key {
        "steps" => args.steps.is_some(),
        "batch" => args.batch.is_some(),
        "transform_set" => args.transform_set.is_some(),
        _ => false,
    }
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn write_report(dir: &Path, r: &RunReport, csv: bool) -> Result<(), Failure> {
    write(&dir.join(format!("seed-{}.json", r.seed)), &r.to_json())?;
    if csv {
        write(&dir.join(format!("seed-{}.csv", r.seed)), &r.matrix.to_csv())?;
    }
    Ok(())
}

pub fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.config).map_err(|e| Failure::invalid(format!("{}: {e}", args.config.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Failure::invalid(format!("{}: {e}", args.config.display())))?;
    check_schema(&doc)?;
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Failure::invalid(format!("config: {e}")))?;
    let methods = resolve_methods(&cfg, &args)?;
    cfg.model.validate().map_err(|e| Failure::invalid(format!("model: {e}")))?;
    cfg.protocol.validate().map_err(|e| Failure::invalid(format!("protocol: {e}")))?;
    let seeds = args.seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
    if seeds.is_empty() {
        return Err(Failure::invalid("seeds: at least one seed is required"));
    }
    let output = args.output.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| {
        PathBuf::from("runs").join(args.config.file_stem().unwrap_or_default())
    });
    let base = args.config.parent().unwrap_or(Path::new("."));
    let domains = cfg.protocol.materialize(base).map_err(|e| Failure::invalid(format!("protocol: {e}")))?;
    let [c, h, w] = domains[0].splits.train.shape();
    if cfg.model.input != [c, h, w] || cfg.model.classes != cfg.protocol.classes {
        return Err(Failure::invalid(format!(
            "model: input {:?} with {} classes does not fit domains of shape {:?} with {} classes",
            cfg.model.input,
            cfg.model.classes,
            [c, h, w],
            cfg.protocol.classes
        )));
    }
    let csv = cfg.formats.iter().any(|f| matches!(f, OutFormat::Csv));
    let table = cfg.formats.iter().any(|f| matches!(f, OutFormat::Table));

    let mut aggregates = Vec::new();
    for m in &methods {
        let dir = output.join(&m.name);
        fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
        let echo = json!({ "protocol": cfg.protocol, "model": cfg.model, "trainer": m.config });
        let mut reports = Vec::new();
        for &seed in &seeds {
            let model = ModelConfig { seed: cfg.model.seed.wrapping_add(seed), ..cfg.model.clone() };
            let started = Instant::now();
            match run_protocol(&domains, &model, &m.config, seed, echo.clone()) {
                Ok(mut r) => {
                    r.method = m.name.clone();
                    write_report(&dir, &r, csv)?;
                    let fin: Vec<String> = r.final_accuracy.iter().map(|v| format!("{v:.3}")).collect();
                    eprintln!("{} seed {seed}: final [{}] in {:.1}s", m.name, fin.join(", "), started.elapsed().as_secs_f64());
                    reports.push(r);
                }
                Err(abort) => {
                    let mut partial = abort.partial;
                    partial.method = m.name.clone();
                    write_report(&dir, &partial, csv)?;
                    let diverged = matches!(abort.error, TrainError::Diverged { .. } | TrainError::Grad(GradError::NonFinite(_)));
                    let code = if diverged { 3 } else { 1 };
                    return Err(Failure { code, message: format!("{} seed {seed}: {}", m.name, abort.error) });
                }
            }
        }
        let agg = aggregate(&reports).map_err(|e| Failure { code: 1, message: e.to_string() })?;
        write(&dir.join("aggregate.json"), &agg.to_json())?;
        if csv {
            write(&dir.join("curves.csv"), &agg.curves_csv())?;
        }
        aggregates.push(agg);
    }
    if table {
        write(&output.join("table.txt"), &render_table(&aggregates))?;
        print!("{}", render_table(&aggregates));
    }
    eprintln!("wrote {}", output.display());
    Ok(())
}
