//! `dlcz` command line: simulate record files, analyze them, sweep the drive
//! strength and fit datasets. Every file output gets a JSON run manifest
//! next to it (`<out>.manifest.json`).

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::correlator::{
    accumulate_results, estimate_metrics_with, CountTable, ErrorMethod, DEFAULT_BOOTSTRAP_REPLICATES, LOW_COUNT,
};
use crate::error::{Error, Result};
use crate::event_sim::{
    run_session, sniff_format, write_records, BinaryRecordReader, CsvRecordReader, RecordFormat, SessionSpec,
    TrialSchedule, SCHEDULE_KEYS,
};
use crate::kv::{format_float, KvDocument};
use crate::model_fit::{fit, log_grid, predict_curves, Bounds, Dataset, FitOptions, DEFAULT_STARTS};
use crate::params::{DetectionConfig, DetectionMode, ModelParams};
use crate::photon_model::{click_statistics, derived_metrics};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;

pub const SWEEP_OBSERVABLES: [&str; 8] = ["p1", "p2", "p12", "g12", "pc", "qc", "w", "naive_ratio"];

#[derive(Debug, Parser)]
#[command(
    name = "dlcz",
    version,
    about = "Heralded photon-pair source: simulate, analyze, sweep and fit"
)]
pub struct Cli {
    /// Worker threads for simulation and multistart fits (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a timestamped detection-record file.
    Simulate(SimulateArgs),
    /// Count coincidences in a record file and report metrics with errors.
    Analyze(AnalyzeArgs),
    /// Tabulate model observables over a log-spaced drive-strength grid.
    Sweep(SweepArgs),
    /// Fit one parameter set to a measured dataset.
    Fit(FitArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Single,
    Split,
}

impl From<ModeArg> for DetectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Single => DetectionMode::Single,
            ModeArg::Split => DetectionMode::Split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Bin,
    Csv,
}

impl From<FormatArg> for RecordFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Bin => RecordFormat::Binary,
            FormatArg::Csv => RecordFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ErrorMethodArg {
    Delta,
    Bootstrap,
}

/// Overrides for the acquisition schedule; unset fields keep the value from
/// the params file or the built-in default.
#[derive(Debug, Clone, Default, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub mot_rate_hz: Option<f64>,
    #[arg(long)]
    pub window_ms: Option<f64>,
    #[arg(long)]
    pub trials_per_window: Option<u32>,
    #[arg(long)]
    pub trial_period_ns: Option<u32>,
    #[arg(long)]
    pub read_delay_ns: Option<u32>,
    #[arg(long)]
    pub write_offset_ns: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Key-value file with model parameters and optional schedule keys.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 44_000)]
    pub trials: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ModeArg::Single)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Bin)]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Record file (binary or CSV, detected from its first bytes).
    pub input: PathBuf,
    /// Trial count of the session; read from the input's manifest if omitted.
    #[arg(long)]
    pub trials: Option<u64>,
    /// Detection mode; read from the input's manifest if omitted.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Total field-2 detection efficiency used for `qc`.
    #[arg(long)]
    pub eta2: Option<f64>,
    /// Params file whose efficiencies define the default `eta2`.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ErrorMethodArg::Delta)]
    pub error_method: ErrorMethodArg,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_REPLICATES)]
    pub replicates: usize,
    /// Bootstrap seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Report destination (stdout if omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the raw count table as CSV.
    #[arg(long)]
    pub counts_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub chi_min: f64,
    #[arg(long, default_value_t = 1e-1)]
    pub chi_max: f64,
    #[arg(long, default_value_t = 50)]
    pub points: usize,
    /// Comma-separated columns after `chi`.
    #[arg(long, value_delimiter = ',', default_values_t = ["p1", "g12", "qc", "p12", "w"].map(String::from))]
    pub observables: Vec<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::Single)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Dataset CSV.
    pub dataset: PathBuf,
    /// Key-value bounds file (`key = [lo, hi]` frees, `key = value` fixes).
    #[arg(long)]
    pub bounds: Option<PathBuf>,
    /// Initial/fixed model parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_STARTS)]
    pub starts: usize,
    /// Detection mode of the `g12`, `qc` and `p12` columns.
    #[arg(long, value_enum, default_value_t = ModeArg::Single)]
    pub mode: ModeArg,
    /// Fit report; covariance and overlay curves go to `<out>.covariance.csv`
    /// and `<out>.overlay.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Record of one run, written next to its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub wall_clock_seconds: f64,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParam { .. } | Error::UnknownKey(_) | Error::Domain(_) => EXIT_USAGE,
        Error::ModeMismatch(_)
        | Error::Format { .. }
        | Error::PartialWrite { .. }
        | Error::Dataset(_)
        | Error::Io(_) => EXIT_IO,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_document(path: &Path) -> Result<KvDocument> {
    KvDocument::parse(&read_text(path)?)
}

fn load_params(path: Option<&Path>, fallback: ModelParams) -> Result<(ModelParams, Option<KvDocument>)> {
    match path {
        None => Ok((fallback, None)),
        Some(p) => {
            let doc = load_document(p)?;
            Ok((ModelParams::from_document(&doc, &SCHEDULE_KEYS)?, Some(doc)))
        }
    }
}

fn resolve_schedule(doc: Option<&KvDocument>, over: &ScheduleArgs) -> Result<TrialSchedule> {
    let mut s = match doc {
        Some(d) => TrialSchedule::from_document(d)?,
        None => TrialSchedule::default(),
    };
    if let Some(v) = over.mot_rate_hz {
        s.mot_rate_hz = v;
    }
    if let Some(v) = over.window_ms {
        s.window_ms = v;
    }
    if let Some(v) = over.trials_per_window {
        s.trials_per_window = v;
    }
    if let Some(v) = over.trial_period_ns {
        s.trial_period_ns = v;
    }
    if let Some(v) = over.read_delay_ns {
        s.read_delay_ns = v;
    }
    if let Some(v) = over.write_offset_ns {
        s.write_offset_ns = v;
    }
    s.validate()?;
    Ok(s)
}

struct Outcome {
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    /// Where the manifest goes; `None` for stdout-only runs.
    anchor: Option<PathBuf>,
}

fn cmd_simulate(a: &SimulateArgs) -> Result<Outcome> {
    let (params, doc) = load_params(a.params.as_deref(), ModelParams::default())?;
    let schedule = resolve_schedule(doc.as_ref(), &a.schedule)?;
    let mode = DetectionMode::from(a.mode);
    let spec = SessionSpec {
        schedule,
        ..SessionSpec::new(params, mode, a.trials, a.seed)
    };
    let stream = run_session(&spec)?;
    let file =
        File::create(&a.out).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", a.out.display()))))?;
    let mut sink = BufWriter::new(file);
    let bytes = write_records(&stream.records, &mut sink, a.format.into())?;
    sink.flush()?;
    let format = RecordFormat::from(a.format);
    Ok(Outcome {
        config: json!({
            "params": params,
            "schedule": schedule,
            "mode": mode,
            "n_trials": a.trials,
            "format": format,
            "records": stream.records.len(),
            "bytes": bytes,
            "duration_ns": schedule.duration_ns(a.trials),
        }),
        inputs: a.params.iter().cloned().collect(),
        outputs: vec![a.out.clone()],
        seed: Some(a.seed),
        anchor: Some(a.out.clone()),
    })
}

/// Session metadata recorded by `simulate` for `path`, if present.
fn session_from_manifest(path: &Path) -> Option<(u64, DetectionMode, ModelParams)> {
    let text = fs::read_to_string(manifest_path(path)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    let cfg = v.get("config")?;
    let n = cfg.get("n_trials")?.as_u64()?;
    let mode: DetectionMode = serde_json::from_value(cfg.get("mode")?.clone()).ok()?;
    let params: ModelParams = serde_json::from_value(cfg.get("params")?.clone()).ok()?;
    Some((n, mode, params))
}

fn count_file(path: &Path, table: CountTable) -> Result<CountTable> {
    let file = File::open(path).map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut reader = BufReader::new(file);
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < prefix.len() {
        let n = reader.read(&mut prefix[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    let src = io::Cursor::new(prefix[..got].to_vec()).chain(reader);
    match sniff_format(&prefix[..got]) {
        RecordFormat::Binary => accumulate_results(table, BinaryRecordReader::new(src)?),
        RecordFormat::Csv => accumulate_results(table, CsvRecordReader::new(src)),
    }
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<(Outcome, String)> {
    let recorded = session_from_manifest(&a.input);
    let n_trials = a
        .trials
        .or(recorded.map(|r| r.0))
        .ok_or_else(|| Error::param("trials", "not given and no manifest next to the input"))?;
    let mode = a
        .mode
        .map(DetectionMode::from)
        .or(recorded.map(|r| r.1))
        .ok_or_else(|| Error::param("mode", "not given and no manifest next to the input"))?;
    let params = match &a.params {
        Some(p) => load_params(Some(p), ModelParams::default())?.0,
        None => recorded.map(|r| r.2).unwrap_or_default(),
    };
    let eta2 = a
        .eta2
        .unwrap_or_else(|| DetectionConfig::new(mode).field2_efficiency(&params));
    let method = match a.error_method {
        ErrorMethodArg::Delta => ErrorMethod::Delta,
        ErrorMethodArg::Bootstrap => ErrorMethod::Bootstrap {
            replicates: a.replicates,
            seed: a.seed,
        },
    };
    let table = count_file(&a.input, CountTable::with_trials(mode, n_trials))?;
    let metrics = estimate_metrics_with(&table, eta2, method)?;
    if !metrics.low_counts.is_empty() {
        log::warn!(
            "counts below {LOW_COUNT}: {}; error bars unreliable",
            metrics.low_counts.join(", ")
        );
    }
    let report = metrics.to_report_string(&table);
    let mut outputs = Vec::new();
    if let Some(out) = &a.out {
        write_file(out, report.as_bytes())?;
        outputs.push(out.clone());
    }
    if let Some(c) = &a.counts_out {
        write_file(c, table.to_csv_string().as_bytes())?;
        outputs.push(c.clone());
    }
    let seed = matches!(method, ErrorMethod::Bootstrap { .. }).then_some(a.seed);
    let outcome = Outcome {
        config: json!({
            "n_trials": n_trials,
            "mode": mode,
            "eta2": eta2,
            "error_method": method,
        }),
        inputs: vec![a.input.clone()],
        anchor: outputs.first().cloned(),
        outputs,
        seed,
    };
    Ok((outcome, report))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

/// CSV body for [`cmd_sweep`]: a `chi` column followed by `observables`;
/// undefined values are empty cells.
pub fn sweep_table(params: &ModelParams, mode: DetectionMode, chis: &[f64], observables: &[String]) -> Result<String> {
    for o in observables {
        if !SWEEP_OBSERVABLES.contains(&o.as_str()) {
            return Err(Error::param("observables", format!("unknown observable `{o}`")));
        }
    }
    let curves = predict_curves(params, chis, mode)?;
    let cfg = DetectionConfig::new(mode);
    let mut out = format!("chi,{}\n", observables.join(","));
    for c in &curves {
        let p = params.with_chi(c.chi);
        let stats = click_statistics(&p, &cfg)?;
        let m = derived_metrics(&stats, &p);
        let cells: Vec<String> = observables
            .iter()
            .map(|o| match o.as_str() {
                "p1" => format_float(stats.p1),
                "p2" => format_float(stats.p2),
                "p12" => format_float(stats.p12),
                "g12" => fmt_opt(m.g12),
                "pc" => fmt_opt(m.pc),
                "qc" => fmt_opt(m.qc),
                "w" => fmt_opt(c.w),
                _ => fmt_opt(m.naive_ratio),
            })
            .collect();
        out.push_str(&format!("{},{}\n", format_float(c.chi), cells.join(",")));
    }
    Ok(out)
}

fn cmd_sweep(a: &SweepArgs) -> Result<Outcome> {
    let (params, _) = load_params(a.params.as_deref(), ModelParams::default())?;
    if !(a.chi_min > 0.0 && a.chi_min < a.chi_max && a.chi_max < 1.0) {
        return Err(Error::param("chi-min", "need 0 < chi-min < chi-max < 1"));
    }
    if a.points == 0 {
        return Err(Error::param("points", "must be >= 1"));
    }
    let mode = DetectionMode::from(a.mode);
    let grid = log_grid(a.chi_min, a.chi_max, a.points);
    let table = sweep_table(&params, mode, &grid, &a.observables)?;
    write_file(&a.out, table.as_bytes())?;
    Ok(Outcome {
        config: json!({
            "params": params,
            "mode": mode,
            "chi_min": a.chi_min,
            "chi_max": a.chi_max,
            "points": a.points,
            "observables": a.observables,
        }),
        inputs: a.params.iter().cloned().collect(),
        outputs: vec![a.out.clone()],
        seed: None,
        anchor: Some(a.out.clone()),
    })
}

/// Overlay grid spanning the fitted drive strengths with some margin.
fn overlay_grid(chis: &[f64]) -> Vec<f64> {
    let pos: Vec<f64> = chis.iter().cloned().filter(|c| *c > 0.0).collect();
    let lo = pos.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = pos.iter().cloned().fold(0.0, f64::max);
    if pos.is_empty() {
        return log_grid(1e-5, 1e-1, 100);
    }
    let (lo, hi) = ((lo / 2.0).max(1e-12), (hi * 2.0).min(0.5));
    if lo >= hi {
        return vec![lo];
    }
    log_grid(lo, hi, 100)
}

fn cmd_fit(a: &FitArgs) -> Result<Outcome> {
    let dataset = Dataset::from_csv_str(&read_text(&a.dataset)?)?;
    let (init, _) = load_params(a.params.as_deref(), ModelParams::default())?;
    let bounds = match &a.bounds {
        Some(b) => Bounds::from_document(&load_document(b)?)?,
        None => Bounds::default(),
    };
    let options = FitOptions {
        mode: a.mode.into(),
        starts: a.starts,
        seed: a.seed,
        ..FitOptions::default()
    };
    let result = fit(&dataset, &init, &bounds, &options)?;
    let cov_path = sibling(&a.out, "covariance.csv");
    let overlay_path = sibling(&a.out, "overlay.csv");
    write_file(&a.out, result.to_document_string().as_bytes())?;
    write_file(&cov_path, result.covariance_csv().as_bytes())?;
    let grid = overlay_grid(&result.chi);
    let overlay = sweep_table(
        &result.params,
        options.mode,
        &grid,
        &["p1", "g12", "qc", "p12", "w"].map(String::from),
    )?;
    write_file(&overlay_path, overlay.as_bytes())?;
    let mut inputs = vec![a.dataset.clone()];
    inputs.extend(a.bounds.iter().cloned());
    inputs.extend(a.params.iter().cloned());
    Ok(Outcome {
        config: json!({
            "init": init,
            "bounds": bounds,
            "options": options,
            "flagged": result.flagged,
            "warnings": result.warnings,
        }),
        inputs,
        outputs: vec![a.out.clone(), cov_path, overlay_path],
        seed: Some(a.seed),
        anchor: Some(a.out.clone()),
    })
}

fn write_manifest(name: &str, argv: &[String], threads: Option<usize>, o: &Outcome, secs: f64) -> Result<()> {
    let Some(anchor) = &o.anchor else {
        return Ok(());
    };
    let paths = |v: &[PathBuf]| v.iter().map(|p| p.display().to_string()).collect();
    let m = RunManifest {
        command: name.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        argv: argv.to_vec(),
        config: o.config.clone(),
        inputs: paths(&o.inputs),
        outputs: paths(&o.outputs),
        seed: o.seed,
        threads,
        wall_clock_seconds: secs,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    write_file(&manifest_path(anchor), text.as_bytes())
}

/// Runs the command; the returned text is destined for stdout.
fn execute(cli: &Cli) -> Result<(&'static str, Outcome, Option<String>)> {
    Ok(match &cli.command {
        Command::Simulate(a) => ("simulate", cmd_simulate(a)?, None),
        Command::Analyze(a) => {
            let (o, report) = cmd_analyze(a)?;
            ("analyze", o, a.out.is_none().then_some(report))
        }
        Command::Sweep(a) => ("sweep", cmd_sweep(a)?, None),
        Command::Fit(a) => ("fit", cmd_fit(a)?, None),
    })
}

fn dispatch(cli: &Cli, argv: &[String], stdout: &mut dyn Write) -> Result<()> {
    let started = Instant::now();
    let (name, outcome, text) = match cli.threads {
        Some(0) => return Err(Error::param("threads", "must be >= 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::param("threads", e.to_string()))?
            .install(|| execute(cli))?,
        None => execute(cli)?,
    };
    if let Some(t) = text {
        stdout.write_all(t.as_bytes())?;
    }
    write_manifest(name, argv, cli.threads, &outcome, started.elapsed().as_secs_f64())
}

/// Runs the command line `args` (including the program name) and returns
/// the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&cli, &argv, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("dlcz").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_args(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["simulate"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn exit_code_classes() {
        assert_eq!(exit_code(&Error::param("chi", "x")), EXIT_USAGE);
        assert_eq!(exit_code(&Error::Dataset("x".into())), EXIT_IO);
        assert_eq!(
            exit_code(&Error::Format {
                offset: 3,
                reason: "x".into()
            }),
            EXIT_IO
        );
    }

    #[test]
    fn sibling_names() {
        assert_eq!(
            manifest_path(Path::new("/tmp/a.bin")),
            PathBuf::from("/tmp/a.bin.manifest.json")
        );
    }

    #[test]
    fn sweep_rejects_unknown_observable() {
        let p = ModelParams::default();
        assert!(sweep_table(&p, DetectionMode::Single, &[0.01], &["g2".into()]).is_err());
        let t = sweep_table(&p, DetectionMode::Single, &[0.01], &["p1".into(), "w".into()]).unwrap();
        assert_eq!(t.lines().count(), 2);
        assert!(t.starts_with("chi,p1,w\n"));
    }
}
