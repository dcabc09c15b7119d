//! Command-line front end: data generation, training, evaluation,
//! explanation, ablation and serving.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::counterfact::{export_rows, wachter_batch, WachterConfig};
use crate::dataio::{
    generate_synthetic, load_csv, load_csv_with_schema, split_train_test, write_csv, ColumnKind, CsvOptions,
    DatasetManifest, GeneratorSpec, RawDataset, RawValue, SyntheticKind,
};
use crate::error::{Error, Result};
use crate::metrics::{cf_report, classif_report, format_cf_table, timed, CfReport, ClassifReport, OutlierProbes};
use crate::model::Model;
use crate::persist::{hash_model, load_bundle, save_bundle};
use crate::service::{serve, AppState};
use crate::training::{log_to_jsonl, train, LossToggles, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "hyconex", version, about = "Hypernetwork classifier with built-in counterfactuals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (CSV plus manifest).
    GenData(GenDataArgs),
    /// Train a model and write a bundle and a training log.
    Train(TrainArgs),
    /// Evaluate a bundle on a labelled CSV.
    Eval(EvalArgs),
    /// Explain one row: prediction, feature importance, counterfactuals.
    Explain(ExplainArgs),
    /// Serve a bundle over HTTP.
    Serve(ServeArgs),
    /// Train and evaluate every loss configuration.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Moons,
    Blobs,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    pub kind: DataKind,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of blobs.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Training CSV; the test split goes to `<stem>_test.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out fraction; 0 writes a single file.
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training configuration; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Target column when the CSV has no manifest (default: last column).
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Loss configuration: base, base+ce, base+ce+flow, base+ce+dist or full.
    #[arg(long)]
    pub losses: Option<String>,
    #[arg(long)]
    pub no_early_stopping: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for report.txt, report.json and counterfactuals.jsonl.
    #[arg(long)]
    pub report: PathBuf,
    /// Reference CSV (usually the training data) for LOF and isolation forest.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Also run the gradient-search baseline on the first N rows.
    #[arg(long)]
    pub wachter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated `column=value` pairs.
    #[arg(long, conflicts_with_all = ["data", "index"])]
    pub row: Option<String>,
    #[arg(long, requires = "index")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub index: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Bundle to serve; without it the service answers 503.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Output directory for ablation.txt and ablation.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Maps an error to its process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Divergence { .. } | Error::NonFiniteGradient { .. } | Error::FlowNonFinite { .. } => {
            EXIT_DIVERGENCE
        }
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Explain(a) => explain_cmd(&a),
        Command::Serve(a) => serve_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let kind = match a.kind {
        DataKind::Moons => SyntheticKind::Moons,
        DataKind::Blobs => SyntheticKind::Blobs { classes: a.classes },
    };
    let data = generate_synthetic(kind, a.n, a.noise, a.seed)?;
    let mut files = vec![file_name(&a.out)];
    let test_fraction = (a.test_fraction > 0.0).then_some(a.test_fraction);
    if let Some(f) = test_fraction {
        let (tr, te) = split_train_test(&data.labels, data.schema.num_classes(), f, a.seed)?;
        let test_path = sibling(&a.out, "_test.csv");
        write_csv(&a.out, &data.subset(&tr))?;
        write_csv(&test_path, &data.subset(&te))?;
        files.push(file_name(&test_path));
    } else {
        write_csv(&a.out, &data)?;
    }
    let manifest = DatasetManifest {
        schema: data.schema.clone(),
        rows: data.len(),
        seed: a.seed,
        test_fraction,
        generator: Some(GeneratorSpec { kind, noise: a.noise }),
        files,
    };
    let mpath = DatasetManifest::path_for(&a.out);
    manifest.save(&mpath)?;
    println!("wrote {} ({} rows) and {}", a.out.display(), data.len(), mpath.display());
    Ok(())
}

/// Loads a CSV, using the schema from its manifest when one exists.
pub fn load_dataset(path: &Path, target: Option<&str>) -> Result<RawDataset> {
    let mpath = DatasetManifest::path_for(path);
    if mpath.exists() {
        let m = DatasetManifest::load(&mpath)?;
        return load_csv_with_schema(path, &m.schema);
    }
    let opts = CsvOptions {
        target: target.map(str::to_string),
        ..CsvOptions::default()
    };
    load_csv(path, &opts)
}

pub fn parse_losses(name: &str) -> Result<LossToggles> {
    LossToggles::ablation_rows()
        .into_iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, t)| t)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown loss configuration `{name}`")))
}

fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_toml(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(a.config.as_deref(), a.seed)?;
    if let Some(l) = &a.losses {
        cfg.losses = parse_losses(l)?;
    }
    if a.no_early_stopping {
        cfg.joint.early_stopping = false;
    }
    cfg.validate()?;
    let data = load_dataset(&a.data, a.target.as_deref())?;
    let (outcome, secs) = timed(|| train(&cfg, &data));
    let outcome = outcome?;
    let manifest = save_bundle(&outcome.model, &a.out)?;
    let log_path = sibling(&a.out, ".log.jsonl");
    write_text(&log_path, &log_to_jsonl(&outcome.log))?;
    write_csv(sibling(&a.out, ".validation.csv"), &outcome.validation)?;
    write_text(&sibling(&a.out, ".config.toml"), &cfg.to_toml())?;
    let v = outcome.final_validation;
    println!("model {} hash {}", a.out.display(), manifest.hash);
    println!(
        "trained in {secs:.1}s; selected epoch {}; validation accuracy {:.4} validity {:.4} p_plaus {:.4} l2 {:.4}",
        match (outcome.selected_epoch, outcome.fallback_epoch) {
            (Some(e), _) => e.to_string(),
            (None, Some(e)) => format!("{e} (no epoch passed the gates; closest kept)"),
            (None, None) => "none".into(),
        },
        v.accuracy,
        v.validity,
        v.p_plaus,
        v.mean_l2
    );
    println!("log {}", log_path.display());
    Ok(())
}

/// Everything `eval` reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_hash: String,
    pub rows: usize,
    pub classification: ClassifReport,
    pub hyconex: CfReport,
    /// Per-input generation time in seconds.
    pub time_per_sample: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wachter: Option<CfReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wachter_time_per_sample: Option<f64>,
}

/// Scores `model` on `data`. `reference` enables LOF and isolation forest;
/// `wachter` runs the baseline on that many leading rows.
pub fn evaluate(
    model: &Model,
    data: &RawDataset,
    reference: Option<&RawDataset>,
    wachter: Option<usize>,
) -> Result<EvalReport> {
    let enc = model.encode(data)?;
    let probs = model.predict_proba(&enc.x)?;
    let classification = classif_report(&probs, &enc.y)?;
    let probes = match reference {
        Some(r) => Some(OutlierProbes::fit(&model.encode(r)?.x, model.config.seed)?),
        None => None,
    };
    let (batch, t) = timed(|| model.counterfactuals(&enc.x));
    let batch = batch?;
    let layout = model.layout();
    let hyconex = cf_report(&enc.x, &batch, &layout, model.thresholds.global, t, probes.as_ref())?;
    let time_per_sample = t / enc.len().max(1) as f64;
    let (wachter, wachter_time_per_sample) = match wachter {
        Some(n) if n > 0 => {
            let idx: Vec<usize> = (0..n.min(enc.len())).collect();
            let xs = enc.x.select_rows(&idx);
            let (wb, wt) = timed(|| wachter_batch(&model.hypernet, &model.flow, &layout, &xs, &WachterConfig::default()));
            let r = cf_report(&xs, &wb?, &layout, model.thresholds.global, wt, probes.as_ref())?;
            (Some(r), Some(wt / idx.len() as f64))
        }
        _ => (None, None),
    };
    Ok(EvalReport {
        model_hash: hash_model(model),
        rows: enc.len(),
        classification,
        hyconex,
        time_per_sample,
        wachter,
        wachter_time_per_sample,
    })
}

/// Text rendering of an [`EvalReport`].
pub fn format_eval(r: &EvalReport) -> String {
    let mut rows = vec![("HyConEx".to_string(), r.hyconex.clone())];
    if let Some(w) = &r.wachter {
        rows.push(("Wachter".to_string(), w.clone()));
    }
    let mut out = format!(
        "model {}\nrows {}\nAUROC {:.4}\naccuracy {:.4}\n\n",
        r.model_hash, r.rows, r.classification.auroc, r.classification.accuracy
    );
    out.push_str(&format_cf_table(&rows));
    out.push_str(&format!("\nHyConEx time per sample {:.6}s\n", r.time_per_sample));
    if let Some(t) = r.wachter_time_per_sample {
        out.push_str(&format!("Wachter time per sample {t:.6}s\n"));
    }
    out
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let model = load_bundle(&a.model)?;
    let data = load_csv_with_schema(&a.data, &model.schema)?;
    let reference = match &a.reference {
        Some(p) => Some(load_csv_with_schema(p, &model.schema)?),
        None => None,
    };
    let report = evaluate(&model, &data, reference.as_ref(), a.wachter)?;
    create_dir(&a.report)?;
    let text = format_eval(&report);
    write_text(&a.report.join("report.txt"), &text)?;
    write_text(
        &a.report.join("report.json"),
        &serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let enc = model.encode(&data)?;
    let batch = model.counterfactuals(&enc.x)?;
    let lines: String = export_rows(&model.preprocessor, &enc.x, &batch, model.thresholds.global)
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect();
    write_text(&a.report.join("counterfactuals.jsonl"), &lines)?;
    print!("{text}");
    Ok(())
}

/// Parses `col=value,col=value` into a raw row in schema order.
pub fn parse_row(model: &Model, spec: &str) -> Result<Vec<RawValue>> {
    let mut given = std::collections::HashMap::new();
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected column=value, got `{part}`")))?;
        given.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(k) = given.keys().find(|k| model.schema.column_index(k).is_none()) {
        return Err(Error::InvalidArgument(format!("`{k}` is not a feature column")));
    }
    model
        .schema
        .columns
        .iter()
        .map(|c| {
            let v = given.get(&c.name).ok_or_else(|| Error::MissingColumn(c.name.clone()))?;
            match c.kind {
                ColumnKind::Numeric => v.parse::<f64>().map(RawValue::Num).map_err(|_| Error::InvalidValue {
                    column: c.name.clone(),
                    message: format!("cannot parse `{v}` as a number"),
                }),
                ColumnKind::Categorical { .. } => Ok(RawValue::Cat(v.clone())),
            }
        })
        .collect()
}

fn explain_cmd(a: &ExplainArgs) -> Result<()> {
    let model = load_bundle(&a.model)?;
    let row = match (&a.row, &a.data, a.index) {
        (Some(spec), _, _) => parse_row(&model, spec)?,
        (None, Some(path), Some(i)) => {
            let data = load_csv_with_schema(path, &model.schema)?;
            data.rows
                .get(i)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("row {i} out of range ({} rows)", data.len())))?
        }
        _ => return Err(Error::InvalidArgument("give --row or --data with --index".into())),
    };
    let ex = model.explain(&row)?;
    println!("{}", serde_json::to_string_pretty(&ex).expect("explanation serializes"));
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<()> {
    let state = match &a.model {
        Some(p) => AppState::with_model(load_bundle(p)?),
        None => AppState::empty(),
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    eprintln!("listening on http://{}", a.addr);
    rt.block_on(serve(state, a.addr))
        .map_err(|e| Error::io(a.addr.to_string(), e))
}

/// Result of one ablation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub losses: LossToggles,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassifReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub counterfactuals: Option<CfReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Configuration used for one ablation row: the given loss terms, no
/// cluster-distance pretraining term, and a fixed epoch budget.
pub fn ablation_config(base: &TrainConfig, losses: LossToggles) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.losses = losses;
    cfg.pretrain.alpha = 0.0;
    cfg.joint.early_stopping = false;
    cfg
}

/// Trains and evaluates every loss configuration on the same seed. A
/// failing row is reported and does not stop the others.
pub fn ablation_matrix(base: &TrainConfig, train_data: &RawDataset, test: &RawDataset) -> Vec<AblationRow> {
    LossToggles::ablation_rows()
        .into_iter()
        .map(|(name, losses)| {
            let cfg = ablation_config(base, losses);
            let run = || -> Result<(ClassifReport, CfReport)> {
                let (outcome, secs) = timed(|| train(&cfg, train_data));
                let model = outcome?.model;
                let mut r = evaluate(&model, test, None, None)?;
                r.hyconex.time_s += secs;
                Ok((r.classification, r.hyconex))
            };
            match run() {
                Ok((c, r)) => AblationRow {
                    name: name.into(),
                    losses,
                    classification: Some(c),
                    counterfactuals: Some(r),
                    error: None,
                },
                Err(e) => AblationRow {
                    name: name.into(),
                    losses,
                    classification: None,
                    counterfactuals: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Table of the ablation rows; failed rows are listed below it.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let ok: Vec<(String, CfReport)> = rows
        .iter()
        .filter_map(|r| r.counterfactuals.clone().map(|c| (r.name.clone(), c)))
        .collect();
    let mut out = format_cf_table(&ok);
    for r in rows {
        if let Some(e) = &r.error {
            out.push_str(&format!("{}: failed: {e}\n", r.name));
        }
    }
    out
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let cfg = resolve_config(a.config.as_deref(), a.seed)?;
    let train_data = load_dataset(&a.data, None)?;
    let test = load_csv_with_schema(&a.test, &train_data.schema)?;
    let rows = ablation_matrix(&cfg, &train_data, &test);
    create_dir(&a.out)?;
    let text = format_ablation(&rows);
    write_text(&a.out.join("ablation.txt"), &text)?;
    write_text(
        &a.out.join("ablation.json"),
        &serde_json::to_string_pretty(&rows).expect("rows serialize"),
    )?;
    print!("{text}");
    if rows.iter().all(|r| r.error.is_some()) {
        return Err(Error::InvalidArgument("every ablation row failed".into()));
    }
    Ok(())
}
