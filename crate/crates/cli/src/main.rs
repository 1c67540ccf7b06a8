//! `gazeseq` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use gazeseq::model::{read_weights, write_weights, Arch, GazeModel};
use gazeseq::oracle::{generate_population, population_stats, traces_from_csv, traces_to_csv, GazeTrace, PersonaRanges};
use gazeseq::preprocess::{
    augment_balance, build_dataset, dataset_to_csv, kfold_split, kfold_split_by_participant, read_gzds, write_gzds, ClassBins,
    SequenceDataset,
};
use gazeseq::runtime::{Policy, Session};
use gazeseq::scenario::{feature_layout, rasterize, ScenarioSpec};
use gazeseq::trainer::{run_kfold_with, train_model_with, TrainConfig};

#[derive(Parser)]
#[command(name = "gazeseq", version, about = "Gaze-direction prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate or rasterize a scenario (builtin name or JSON path)
    Scenario {
        #[command(subcommand)]
        action: ScenarioAction,
    },
    /// Simulate a synthetic participant population
    Gen(GenArgs),
    /// Turn traces into a labelled window dataset (GZDS)
    Preprocess(PreprocessArgs),
    /// Train one model on a dataset
    Train(TrainArgs),
    /// k-fold cross-validation
    Kfold(KfoldArgs),
    /// Run the streaming controller on stdin/stdout
    Stream(StreamArgs),
    /// Write plot-ready CSV from traces or a command log
    ExportPlot(ExportPlotArgs),
}

#[derive(Subcommand)]
enum ScenarioAction {
    Validate {
        scenario: String,
    },
    Rasterize {
        scenario: String,
        /// Output CSV (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 41)]
    participants: u32,
    #[arg(long)]
    seed: u64,
    /// Output directory
    #[arg(long, default_value = "traces")]
    out: PathBuf,
    /// JSON overriding the persona sampling ranges
    #[arg(long)]
    ranges: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Trace CSV file or directory of trace CSVs
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    scenario: String,
    /// Oversample minority classes up to the largest class
    #[arg(long)]
    balance: bool,
    #[arg(long, default_value_t = 10)]
    kfold: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Keep each participant's windows in one fold
    #[arg(long)]
    group_by_participant: bool,
    /// Also dump the dataset as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Lstm,
    Transformer,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Arch {
        match a {
            ArchArg::Lstm => Arch::Lstm,
            ArchArg::Transformer => Arch::Transformer,
        }
    }
}

#[derive(Args)]
struct TrainingFlags {
    #[arg(long, value_enum)]
    arch: ArchArg,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Print per-epoch progress to stderr
    #[arg(long)]
    verbose: bool,
}

impl TrainingFlags {
    fn config(&self, jobs: usize) -> TrainConfig {
        TrainConfig {
            arch: self.arch.into(),
            lr: self.lr,
            max_epochs: self.max_epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            seed: self.seed,
            val_fraction: self.val_fraction,
            jobs,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainingFlags,
    /// Weights output (GZWT)
    #[arg(long)]
    out: PathBuf,
    /// Leave this fold out of training
    #[arg(long)]
    exclude_fold: Option<u16>,
}

#[derive(Args)]
struct KfoldArgs {
    #[command(flatten)]
    flags: TrainingFlags,
    /// Metrics JSON output
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Directory for per-fold weights
    #[arg(long)]
    weights_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Scenario providing the roster and column layout
    #[arg(long)]
    scenario_meta: String,
    #[arg(long, default_value = "argmax", value_parser = ["argmax", "top3-hysteresis"])]
    policy: String,
    /// Write the command log CSV here at end of input
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["traces", "commands"])))]
struct ExportPlotArgs {
    /// Trace CSV file or directory: writes per-frame population mean/std
    #[arg(long)]
    traces: Option<PathBuf>,
    /// Command log from `stream --trace-out`: writes t_s, yaw, class
    #[arg(long)]
    commands: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Provenance block stored in every JSON artifact. Inputs are identified by
/// file name and content digest so reruns in other directories match.
fn provenance(command: &str, seed: Option<u64>, inputs: &[(String, &[u8])], extra: Value) -> Value {
    let inputs: Vec<Value> = inputs.iter().map(|(name, bytes)| json!({"name": name, "sha256": sha256_hex(bytes)})).collect();
    json!({
        "tool": "gazeseq",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "inputs": inputs,
        "settings": extra,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| format!("writing {}: {e}", path.display()).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| format!("reading {}: {e}", path.display()).into())
}

/// Scenario by builtin name or path, plus the raw JSON for digests.
fn load_scenario(name: &str) -> CliResult<(ScenarioSpec, Vec<u8>)> {
    let spec = ScenarioSpec::load(name)?;
    let raw = match ScenarioSpec::builtin_json(name) {
        Some(text) => text.as_bytes().to_vec(),
        None => read(Path::new(name))?,
    };
    Ok((spec, raw))
}

/// Reads one trace CSV or every `*.csv` in a directory (sorted by name).
fn load_traces(path: &Path, scenario_id: &str) -> CliResult<(Vec<GazeTrace>, Vec<(String, Vec<u8>)>)> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> =
            fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "csv")).collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(format!("no trace CSV files in {}", path.display()).into());
    }
    let mut traces = Vec::new();
    let mut raw = Vec::new();
    for f in files {
        let bytes = read(&f)?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| format!("{} is not UTF-8", f.display()))?;
        traces.extend(traces_from_csv(&text, scenario_id).map_err(|e| format!("{}: {e}", f.display()))?);
        raw.push((file_name(&f), bytes));
    }
    traces.sort_by_key(|t| t.participant_id);
    if traces.windows(2).any(|w| w[0].participant_id == w[1].participant_id) {
        return Err("duplicate participant id across trace files".into());
    }
    Ok((traces, raw))
}

fn cmd_scenario(action: ScenarioAction) -> CliResult<()> {
    match action {
        ScenarioAction::Validate { scenario } => {
            let spec: ScenarioSpec = match ScenarioSpec::builtin_json(&scenario) {
                Some(text) => serde_json::from_str(text)?,
                None => serde_json::from_slice(&read(Path::new(&scenario))?)?,
            };
            let report = spec.validate();
            if report.is_ok() {
                println!("{}: ok ({} events, {} frames)", spec.id, spec.events.len(), spec.n_frames());
                Ok(())
            } else {
                report.into_result().map_err(Into::into)
            }
        }
        ScenarioAction::Rasterize { scenario, out } => {
            let (spec, _) = load_scenario(&scenario)?;
            let csv = rasterize(&spec)?.to_csv(&feature_layout(&spec)?);
            match out {
                Some(path) => write_file(&path, csv.as_bytes()),
                None => match io::stdout().write_all(csv.as_bytes()) {
                    Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
                    r => r.map_err(Into::into),
                },
            }
        }
    }
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let (spec, raw_spec) = load_scenario(&a.scenario)?;
    let (ranges, raw_ranges) = match &a.ranges {
        Some(p) => {
            let bytes = read(p)?;
            (serde_json::from_slice::<PersonaRanges>(&bytes)?, Some((file_name(p), bytes)))
        }
        None => (PersonaRanges::default(), None),
    };
    let pop = generate_population(&spec, a.participants, a.seed, &ranges)?;
    fs::create_dir_all(&a.out)?;
    let mut files = Vec::new();
    for tr in &pop.traces {
        let name = format!("trace_p{:03}.csv", tr.participant_id);
        let csv = traces_to_csv(std::slice::from_ref(tr));
        write_file(&a.out.join(&name), csv.as_bytes())?;
        files.push(json!({"name": name, "participant_id": tr.participant_id, "sha256": sha256_hex(csv.as_bytes())}));
    }
    let mut inputs = vec![(format!("scenario:{}", spec.id), raw_spec.as_slice())];
    if let Some((n, b)) = &raw_ranges {
        inputs.push((n.clone(), b.as_slice()));
    }
    let doc = json!({
        "provenance": provenance("gen", Some(a.seed), &inputs, json!({"participants": a.participants})),
        "scenario": spec.id,
        "ranges": ranges,
        "participants": pop.participants,
        "trace_files": files,
    });
    write_json(&a.out.join("personas.json"), &doc)?;
    eprintln!("wrote {} traces and personas.json to {}", pop.traces.len(), a.out.display());
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> CliResult<()> {
    let (spec, raw_spec) = load_scenario(&a.scenario)?;
    let (traces, raw_traces) = load_traces(&a.traces, &spec.id)?;
    let matrix = rasterize(&spec)?;
    let bins = ClassBins::for_scenario(&spec)?;
    let (ds, sources, warnings) = build_dataset(&spec, &matrix, &traces, &bins, a.stride)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let raw_hist = ds.class_histogram();
    let ds = if a.balance { augment_balance(&ds, &matrix, &sources, a.seed)? } else { ds };
    let ds = if a.group_by_participant { kfold_split_by_participant(&ds, a.kfold, a.seed)? } else { kfold_split(&ds, a.kfold, a.seed)? };
    let bytes = write_gzds(&ds);
    write_file(&a.out, &bytes)?;
    if let Some(csv) = &a.csv {
        write_file(csv, dataset_to_csv(&ds).as_bytes())?;
    }
    let mut inputs = vec![(format!("scenario:{}", spec.id), raw_spec.as_slice())];
    inputs.extend(raw_traces.iter().map(|(n, b)| (n.clone(), b.as_slice())));
    let settings = json!({"balance": a.balance, "kfold": a.kfold, "stride": a.stride, "group_by_participant": a.group_by_participant});
    let doc = json!({
        "provenance": provenance("preprocess", Some(a.seed), &inputs, settings),
        "scenario": spec.id,
        "n_samples": ds.len(),
        "n_classes": ds.n_classes,
        "class_histogram_raw": raw_hist,
        "class_histogram": ds.class_histogram(),
        "warnings": warnings,
        "sha256": sha256_hex(&bytes),
    });
    write_json(&sidecar(&a.out), &doc)?;
    eprintln!("wrote {} samples ({} classes) to {}", ds.len(), ds.n_classes, a.out.display());
    Ok(())
}

/// Dataset plus its scenario id from the preprocess sidecar, when present.
fn load_dataset(path: &Path) -> CliResult<(SequenceDataset, Vec<u8>)> {
    let bytes = read(path)?;
    let mut ds = read_gzds(&bytes)?;
    if let Ok(meta) = fs::read(sidecar(path)) {
        if let Ok(v) = serde_json::from_slice::<Value>(&meta) {
            if let Some(id) = v.get("scenario").and_then(Value::as_str) {
                ds.scenario_id = id.to_string();
            }
        }
    }
    Ok((ds, bytes))
}

fn progress_printer(verbose: bool) -> impl Fn(&str) + Sync {
    move |msg: &str| {
        if verbose {
            eprintln!("{msg}");
        }
    }
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let (ds, raw) = load_dataset(&a.flags.dataset)?;
    let cfg = a.flags.config(1);
    let samples: Vec<_> = ds.samples.iter().filter(|s| Some(s.fold) != a.exclude_fold).collect();
    let verbose = a.flags.verbose;
    let trained = train_model_with(&samples, ds.n_classes, &cfg, &|e| {
        if verbose {
            eprintln!("epoch {} loss {:.4} val_top1 {:.4}", e.epoch, e.train_loss, e.val_top1);
        }
    })?;
    write_file(&a.out, &write_weights(&trained.model))?;
    let doc = json!({
        "provenance": provenance("train", Some(cfg.seed), &[(file_name(&a.flags.dataset), raw.as_slice())], json!({"exclude_fold": a.exclude_fold})),
        "config": cfg,
        "param_count": trained.model.param_count(),
        "best_epoch": trained.best_epoch,
        "log": trained.log,
    });
    write_json(&sidecar(&a.out), &doc)?;
    eprintln!(
        "trained {} for {} epochs (best {}), {} parameters -> {}",
        cfg.arch,
        trained.epochs_run(),
        trained.best_epoch,
        trained.model.param_count(),
        a.out.display()
    );
    Ok(())
}

fn cmd_kfold(a: KfoldArgs) -> CliResult<()> {
    let (ds, raw) = load_dataset(&a.flags.dataset)?;
    let cfg = a.flags.config(a.jobs);
    let out = run_kfold_with(&ds, &cfg, a.k, &progress_printer(a.flags.verbose))?;
    let mut doc = serde_json::to_value(&out.report)?;
    doc["provenance"] = provenance("kfold", Some(cfg.seed), &[(file_name(&a.flags.dataset), raw.as_slice())], json!({"k": a.k}));
    write_json(&a.report, &doc)?;
    if let Some(dir) = &a.weights_dir {
        fs::create_dir_all(dir)?;
        for (i, m) in out.models.iter().enumerate() {
            write_file(&dir.join(format!("fold_{i:02}.gzwt")), &write_weights(m))?;
        }
    }
    for f in &out.report.folds {
        eprintln!("fold {} epochs {} test top1 {:.4} top2 {:.4} top3 {:.4}", f.fold, f.epochs, f.test.top1, f.test.top2, f.test.top3);
    }
    let m = &out.report.summary.mean.test;
    eprintln!("mean test top1 {:.4} top2 {:.4} top3 {:.4}", m.top1, m.top2, m.top3);
    Ok(())
}

fn cmd_stream(a: StreamArgs) -> CliResult<()> {
    let model = read_weights(&read(&a.weights)?)?;
    let (spec, _) = load_scenario(&a.scenario_meta)?;
    let policy: Policy = a.policy.parse()?;
    let mut session = Session::new(&spec, Some(&model), policy)?;
    let stdin = io::stdin();
    let mut stdout = io::stdout().lock();
    for line in stdin.lock().lines() {
        if let Some(reply) = session.handle_line(&line?) {
            writeln!(stdout, "{reply}")?;
            stdout.flush()?;
        }
    }
    let lat = session.latency();
    eprintln!("ticks {} switches {} mean {:.3} ms max {:.3} ms", lat.ticks, session.switch_count(), lat.mean_ms, lat.max_ms);
    if let Some(path) = &a.trace_out {
        write_file(path, session.export_trace()?.as_bytes())?;
    }
    Ok(())
}

fn cmd_export_plot(a: ExportPlotArgs) -> CliResult<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    if let Some(path) = &a.traces {
        let (traces, _) = load_traces(path, "")?;
        let stats = population_stats(&traces)?;
        out.push_str("t_s,mean_yaw_deg,std_yaw_deg\n");
        for (f, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
            let _ = writeln!(out, "{:.1},{m},{s}", f as f64 / 10.0);
        }
    } else if let Some(path) = &a.commands {
        let text = String::from_utf8(read(path)?).map_err(|_| "command log is not UTF-8")?;
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty command log")?;
        if !header.starts_with("t_s,class,yaw_deg") {
            return Err(format!("unexpected command log header `{header}`").into());
        }
        out.push_str("t_s,yaw_deg,class\n");
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 3 {
                return Err(format!("bad command row `{line}`").into());
            }
            let _ = writeln!(out, "{},{},{}", f[0], f[2], f[1]);
        }
    }
    write_file(&a.out, out.as_bytes())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Scenario { action } => cmd_scenario(action),
        Command::Gen(a) => cmd_gen(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Kfold(a) => cmd_kfold(a),
        Command::Stream(a) => cmd_stream(a),
        Command::ExportPlot(a) => cmd_export_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
