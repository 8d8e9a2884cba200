//! Command-line driver: benchmark generation, training, adaptation,
//! evaluation, diagnostics, gradient checks and parameter sweeps.
//!
//! Every command writes its artifacts plus a `manifest.json` listing the
//! effective configuration and a SHA-256 checksum for each input read and
//! each output written. Nothing time-dependent is recorded, so reruns are
//! byte-identical.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration
//! error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use spa_core::adapter::AdapterParams;
use spa_core::datagen::{
    self, load_benchmark, sha256_hex, write_benchmark, GenConfig, LoadedBenchmark,
};
use spa_core::diagnostics::PValueRegistry;
use spa_core::encoder::{FrozenEncoder, PromptRows, PromptSidecar, PromptState};
use spa_core::eval::MetricsReport;
use spa_core::gradcheck::{gradcheck, GradcheckConfig};
use spa_core::linalg::Matrix;
use spa_core::pipeline::{
    self, adapt_prompts, diagnose, evaluate_prompts, initial_state, DiagnoseSpec, RunSpec,
};
use spa_core::sas::{CalibratedPrompts, CalibratedRows};
use spa_core::table::EmbeddingTable;
use spa_core::training::TrainConfig;
use spa_core::vocab_space::PrimitiveKind;
use spa_core::SpaError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "spa",
    version,
    about = "Structure-aware prompt adaptation experiments"
)]
pub struct Cli {
    /// Seed override for the command's random streams.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON configuration; flags take precedence over its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Suppress the summary line on stdout.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark directory.
    Gen(GenArgs),
    /// Train prompt tokens on a benchmark.
    Train(TrainArgs),
    /// Calibrate unseen primitives from a trained state.
    Adapt(AdaptArgs),
    /// Score the test split and compute the calibration-bias metrics.
    Eval(EvalArgs),
    /// Semantic/visual alignment, neighbour consistency and isolation groups.
    Diagnose(DiagnoseArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Train, adapt and evaluate across a grid of one hyper-parameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value = "zappos_shape")]
    pub preset: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight of the structure term; 0 trains the baseline.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(short = 'K', long = "neighbors")]
    pub k: Option<usize>,
    /// Temperature of the neighbour distributions.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_cls: Option<f64>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub trained: PathBuf,
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(short = 'K', long = "neighbors", default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.10)]
    pub tau: f64,
    #[arg(long, default_value = "sas")]
    pub adapter: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub trained: PathBuf,
    #[arg(long)]
    pub bench: PathBuf,
    /// Output of `adapt`; when absent the adapter runs inline.
    #[arg(long, conflicts_with = "no_sas")]
    pub calibrated: Option<PathBuf>,
    /// Keep unseen primitives at their initial tokens.
    #[arg(long)]
    pub no_sas: bool,
    /// Top-k correctness for every split.
    #[arg(long, visible_alias = "k", default_value_t = 1)]
    pub topk: usize,
    #[arg(short = 'K', long = "neighbors", default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.10)]
    pub tau: f64,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub bench: PathBuf,
    /// Trained directory whose encoder and context define the encoded space.
    #[arg(long)]
    pub trained: Option<PathBuf>,
    #[arg(short = 'K', long = "neighbors", default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long = "p-value", default_value = "t")]
    pub p_value: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub coordinates: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, hide = true)]
    pub inject_sign_error: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum SweepParam {
    #[value(name = "K")]
    #[serde(rename = "K")]
    K,
    #[value(name = "lambda")]
    #[serde(rename = "lambda")]
    Lambda,
    #[value(name = "tau")]
    #[serde(rename = "tau")]
    Tau,
}

impl SweepParam {
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::K => vec![0.0, 1.0, 3.0, 5.0, 7.0, 10.0],
            SweepParam::Lambda => vec![0.05, 0.10, 0.50, 1.0, 5.0, 10.0],
            SweepParam::Tau => vec![0.01, 0.05, 0.07, 0.10, 0.20],
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values; defaults to the standard grid for the parameter.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    #[arg(long, visible_alias = "k", default_value_t = 1)]
    pub topk: usize,
}

/// A malformed invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn is_config_error(e: &SpaError) -> bool {
    matches!(
        e,
        SpaError::Json { .. }
            | SpaError::InvalidConfig(_)
            | SpaError::UnknownPreset(_)
            | SpaError::UnknownStrategy { .. }
            | SpaError::InfeasibleConfig(_)
            | SpaError::NegativeLambda(_)
            | SpaError::NonPositiveTemperature(_)
            | SpaError::KOutOfRange { .. }
            | SpaError::DegenerateQuantiles(_)
    )
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<SpaError>() {
            return if is_config_error(e) { 2 } else { 1 };
        }
    }
    1
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Adapt(a) => cmd_adapt(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Diagnose(a) => cmd_diagnose(cli, a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
    }
}

fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| SpaError::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| SpaError::json(path.display().to_string(), e))?)
}

fn reject_config(cli: &Cli, command: &str) -> Result<()> {
    if cli.config.is_some() {
        return Err(usage(format!(
            "`{command}` takes its settings from flags; --config is not accepted"
        )));
    }
    Ok(())
}

fn out_dir(cli: &Cli, command: &str) -> PathBuf {
    cli.out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(command))
}

fn say(cli: &Cli, line: String) {
    if !cli.quiet {
        println!("{line}");
    }
}

fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialise");
    s.push('\n');
    s.into_bytes()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Collects input checksums and writes outputs, recording each one.
struct Recorder {
    dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Recorder {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| SpaError::io(&dir, e))?;
        Ok(Self {
            dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn input_files(&mut self, label: &str, dir: &Path, names: &[&str]) -> Result<()> {
        for name in names {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| SpaError::io(&path, e))?;
            self.inputs
                .insert(format!("{label}/{name}"), sha256_hex(&bytes));
        }
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        datagen::write_file(&self.dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn finish(
        self,
        command: &str,
        config: Value,
        seeds: BTreeMap<String, u64>,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: VERSION.to_string(),
            config,
            seeds,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        datagen::write_file(&self.dir.join("manifest.json"), &to_json_bytes(&manifest))?;
        Ok(manifest)
    }
}

const BENCH_INPUTS: [&str; 6] = [
    "vocab.json",
    "space.json",
    "train.tsv",
    "test.tsv",
    "observable_attr.tsv",
    "observable_obj.tsv",
];

const TRAINED_FILES: [&str; 6] = [
    "prompt_state.json",
    "context.tsv",
    "theta_attr.tsv",
    "theta_obj.tsv",
    "theta_attr_init.tsv",
    "theta_obj_init.tsv",
];

fn open_bench(rec: &mut Recorder, dir: &Path) -> Result<LoadedBenchmark> {
    rec.input_files("bench", dir, &BENCH_INPUTS)?;
    Ok(load_benchmark(dir)?)
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> Result<i32> {
    let mut config: GenConfig = match &cli.config {
        Some(path) => load_config(path)?,
        None => datagen::preset(&args.preset)?,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let bench = datagen::generate(&config)?;
    let dir = out_dir(cli, "gen");
    let manifest = write_benchmark(&bench, &dir)?;
    say(
        cli,
        format!(
            "wrote {} files for {} compositions ({} train / {} test samples) to {}",
            manifest.checksums.len() + 1,
            bench.space.len(),
            bench.dataset.train.len(),
            bench.dataset.test.len(),
            dir.display()
        ),
    );
    Ok(0)
}

fn table_bytes(names: &[String], rows: &Matrix) -> Result<(Vec<u8>, EmbeddingTable)> {
    // Re-parse what is written so downstream checksums match the file.
    let text = EmbeddingTable::new(names.to_vec(), rows.clone())?.to_tsv();
    let parsed = EmbeddingTable::from_tsv(&text)?;
    Ok((text.into_bytes(), parsed))
}

fn effective_train_config(cli: &Cli, args: &TrainArgs, d: usize) -> Result<TrainConfig> {
    let mut c: TrainConfig = match &cli.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    c.d = d;
    if let Some(v) = cli.seed {
        c.seed = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.lambda {
        c.lambda = v;
    }
    if let Some(v) = args.lr {
        c.lr = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = args.k {
        c.k = v;
    }
    if let Some(v) = args.tau {
        c.tau_scl = v;
    }
    if let Some(v) = args.tau_cls {
        c.tau_cls = v;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<i32> {
    let mut rec = Recorder::new(out_dir(cli, "train"))?;
    let bench = open_bench(&mut rec, &args.bench)?;
    let config = effective_train_config(cli, args, bench.dataset.d)?;
    let (_, state, report) = pipeline::train_prompts(bench.view(), &config)?;

    let mut restored = Vec::new();
    let context_names: Vec<String> = (0..state.context_len())
        .map(|i| format!("ctx{i}"))
        .collect();
    let (bytes, context) = table_bytes(&context_names, state.context())?;
    rec.write("context.tsv", &bytes)?;
    for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
        let names = &bench.space.vocabulary(kind).seen;
        let k = kind.as_str();
        let (bytes, theta) = table_bytes(names, state.theta(kind))?;
        rec.write(&format!("theta_{k}.tsv"), &bytes)?;
        let (bytes, init) = table_bytes(names, state.init(kind))?;
        rec.write(&format!("theta_{k}_init.tsv"), &bytes)?;
        restored.push((theta.into_matrix(), init.into_matrix()));
    }
    let (obj_theta, obj_init) = restored.pop().expect("two kinds");
    let (attr_theta, attr_init) = restored.pop().expect("two kinds");
    let saved = PromptState::new(context.into_matrix(), attr_init, obj_init)?
        .with_current(attr_theta, obj_theta)?;
    let sidecar = PromptSidecar {
        seed: config.seed,
        m: config.m,
        d: config.d,
        checksum: saved.trainable_checksum(),
    };
    rec.write("prompt_state.json", &to_json_bytes(&sidecar))?;
    rec.write("report.jsonl", report.to_jsonl().as_bytes())?;
    rec.finish(
        "train",
        serde_json::to_value(&config)?,
        seeds(&[("train", config.seed)]),
    )?;
    let last = report.last();
    say(
        cli,
        format!(
            "trained {} epochs: total {:.6} (ce {:.6}, scl {:.6}, lambda {})",
            last.epoch, last.total, last.ce, last.scl, config.lambda
        ),
    );
    Ok(0)
}

/// Encoder and prompt state restored from a `train` output directory.
fn load_trained(
    rec: Option<&mut Recorder>,
    dir: &Path,
) -> Result<(FrozenEncoder, PromptState, PromptSidecar)> {
    if let Some(rec) = rec {
        rec.input_files("trained", dir, &TRAINED_FILES)?;
    }
    let sidecar: PromptSidecar = load_config(&dir.join("prompt_state.json"))?;
    let load = |name: &str| -> Result<EmbeddingTable> {
        Ok(spa_core::table::load_table(&dir.join(name))?)
    };
    let state = PromptState::new(
        load("context.tsv")?.into_matrix(),
        load("theta_attr_init.tsv")?.into_matrix(),
        load("theta_obj_init.tsv")?.into_matrix(),
    )?
    .with_current(
        load("theta_attr.tsv")?.into_matrix(),
        load("theta_obj.tsv")?.into_matrix(),
    )?;
    if state.trainable_checksum() != sidecar.checksum {
        bail!(
            "{}: prompt tables do not match the checksum in prompt_state.json",
            dir.display()
        );
    }
    if state.dim() != sidecar.d {
        bail!(
            "{}: prompt dimension {} but prompt_state.json says {}",
            dir.display(),
            state.dim(),
            sidecar.d
        );
    }
    Ok((
        FrozenEncoder::from_seed(sidecar.seed, sidecar.d),
        state,
        sidecar,
    ))
}

fn check_trained_matches(bench: &LoadedBenchmark, state: &PromptState) -> Result<()> {
    for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
        if state.num_seen(kind) != bench.space.vocabulary(kind).num_seen()
            || state.dim() != bench.dataset.d
        {
            bail!(
                "trained prompts do not match the benchmark's {} vocabulary",
                kind.as_str()
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub seen: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub adapter: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub tau: f64,
    pub attr: BTreeMap<String, Vec<ProvenanceEntry>>,
    pub obj: BTreeMap<String, Vec<ProvenanceEntry>>,
}

fn provenance_map(
    bench: &LoadedBenchmark,
    rows: &CalibratedRows,
) -> BTreeMap<String, Vec<ProvenanceEntry>> {
    let vocab = bench.space.vocabulary(rows.kind);
    rows.provenance
        .iter()
        .enumerate()
        .map(|(u, nb)| {
            let entries = nb
                .iter()
                .map(|w| ProvenanceEntry {
                    seen: vocab.seen[w.seen].clone(),
                    weight: w.weight,
                })
                .collect();
            (vocab.unseen[u].clone(), entries)
        })
        .collect()
}

fn adapter_params(k: usize, tau: f64) -> Result<AdapterParams> {
    if k == 0 {
        return Err(usage(
            "-K must be at least 1; use --no-sas or --adapter none to skip adaptation",
        ));
    }
    Ok(AdapterParams { k, tau })
}

fn cmd_adapt(cli: &Cli, args: &AdaptArgs) -> Result<i32> {
    reject_config(cli, "adapt")?;
    let mut rec = Recorder::new(out_dir(cli, "adapt"))?;
    let bench = open_bench(&mut rec, &args.bench)?;
    let (enc, state, sidecar) = load_trained(Some(&mut rec), &args.trained)?;
    check_trained_matches(&bench, &state)?;
    let params = adapter_params(args.k, args.tau)?;
    let calibrated = adapt_prompts(bench.view(), &enc, &state, &args.adapter, &params)?;
    for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
        let rows = calibrated.get(kind);
        let (bytes, _) = table_bytes(&bench.space.vocabulary(kind).unseen, &rows.theta)?;
        rec.write(&format!("calibrated_{}.tsv", kind.as_str()), &bytes)?;
    }
    let provenance = Provenance {
        adapter: args.adapter.clone(),
        k: args.k,
        tau: args.tau,
        attr: provenance_map(&bench, &calibrated.attr),
        obj: provenance_map(&bench, &calibrated.obj),
    };
    rec.write("provenance.json", &to_json_bytes(&provenance))?;
    rec.finish(
        "adapt",
        json!({"adapter": args.adapter, "K": args.k, "tau": args.tau}),
        seeds(&[("encoder", sidecar.seed)]),
    )?;
    say(
        cli,
        format!(
            "calibrated {} unseen attributes and {} unseen objects with `{}`",
            calibrated.attr.theta.rows(),
            calibrated.obj.theta.rows(),
            args.adapter
        ),
    );
    Ok(0)
}

fn load_calibrated(
    rec: &mut Recorder,
    dir: &Path,
    bench: &LoadedBenchmark,
) -> Result<CalibratedPrompts> {
    rec.input_files(
        "calibrated",
        dir,
        &["calibrated_attr.tsv", "calibrated_obj.tsv"],
    )?;
    let mut rows = Vec::new();
    for kind in [PrimitiveKind::Attribute, PrimitiveKind::Object] {
        let table =
            spa_core::table::load_table(&dir.join(format!("calibrated_{}.tsv", kind.as_str())))?;
        let vocab = bench.space.vocabulary(kind);
        if table.names() != vocab.unseen.as_slice() {
            bail!(
                "calibrated_{}.tsv rows do not match the unseen vocabulary",
                kind.as_str()
            );
        }
        rows.push(CalibratedRows {
            kind,
            theta: table.into_matrix(),
            provenance: vec![],
        });
    }
    let obj = rows.pop().expect("two kinds");
    let attr = rows.pop().expect("two kinds");
    Ok(CalibratedPrompts { attr, obj })
}

fn summary(m: &MetricsReport) -> String {
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
    format!(
        "top-{}: AO {} A*O {} AO* {} A*O* {} | HM {:.2} AUC {:.2}",
        m.k,
        pct(m.splits.ao),
        pct(m.splits.astar_o),
        pct(m.splits.a_ostar),
        pct(m.splits.astar_ostar),
        100.0 * m.hm.value,
        100.0 * m.auc
    )
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<i32> {
    reject_config(cli, "eval")?;
    if args.topk == 0 {
        return Err(usage("--topk must be at least 1"));
    }
    let mut rec = Recorder::new(out_dir(cli, "eval"))?;
    let bench = open_bench(&mut rec, &args.bench)?;
    let (enc, state, sidecar) = load_trained(Some(&mut rec), &args.trained)?;
    check_trained_matches(&bench, &state)?;
    let (calibrated, source) = match (&args.calibrated, args.no_sas) {
        (Some(dir), _) => (load_calibrated(&mut rec, dir, &bench)?, "file".to_string()),
        (None, true) => (
            adapt_prompts(
                bench.view(),
                &enc,
                &state,
                "none",
                &AdapterParams::default(),
            )?,
            "none".to_string(),
        ),
        (None, false) => (
            adapt_prompts(
                bench.view(),
                &enc,
                &state,
                "sas",
                &adapter_params(args.k, args.tau)?,
            )?,
            "sas".to_string(),
        ),
    };
    let (_, metrics) = evaluate_prompts(bench.view(), &enc, &state, &calibrated, args.topk)?;
    rec.write("metrics.json", metrics.to_json().as_bytes())?;
    rec.finish(
        "eval",
        json!({"topk": args.topk, "unseen_prompts": source, "K": args.k, "tau": args.tau}),
        seeds(&[("encoder", sidecar.seed)]),
    )?;
    say(cli, summary(&metrics));
    Ok(0)
}

fn cmd_diagnose(cli: &Cli, args: &DiagnoseArgs) -> Result<i32> {
    reject_config(cli, "diagnose")?;
    let mut rec = Recorder::new(out_dir(cli, "diagnose"))?;
    let bench = open_bench(&mut rec, &args.bench)?;
    let seed = cli.seed.unwrap_or(0);
    let (enc, state, encoder_seed) = match &args.trained {
        Some(dir) => {
            let (enc, state, sidecar) = load_trained(Some(&mut rec), dir)?;
            check_trained_matches(&bench, &state)?;
            (enc, state, sidecar.seed)
        }
        None => {
            let (enc, state) = initial_state(bench.view(), seed, TrainConfig::default().m)?;
            (enc, state, seed)
        }
    };
    let method = PValueRegistry::default().build(&args.p_value, seed)?;
    let spec = DiagnoseSpec {
        k: args.k,
        trials: args.trials,
        seed,
        ..Default::default()
    };
    let report = diagnose(bench.view(), &enc, &state, &spec, method.as_ref())?;
    rec.write("diagnostics.json", &to_json_bytes(&report))?;
    rec.finish(
        "diagnose",
        json!({"K": args.k, "trials": args.trials, "p_value": args.p_value}),
        seeds(&[("encoder", encoder_seed), ("neighbors", seed)]),
    )?;
    say(
        cli,
        format!(
            "pearson {:.4} (p = {:.3e}), spearman {:.4}; top-{} neighbours {:.4} vs random {:.4}",
            report.pearson,
            report.p_value,
            report.spearman,
            args.k,
            report.consistency.topk_semantic_neighbor_similarity,
            report.consistency.random_neighbor_similarity
        ),
    );
    Ok(0)
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<i32> {
    let mut config: GradcheckConfig = match &cli.config {
        Some(p) => load_config(p)?,
        None => GradcheckConfig::default(),
    };
    if let Some(v) = cli.seed {
        config.seed = v;
    }
    if let Some(v) = args.coordinates {
        config.coordinates = v;
    }
    if let Some(v) = args.d {
        config.d = v;
    }
    config.flip_sign |= args.inject_sign_error;
    let report = gradcheck(&config)?;
    let mut rec = Recorder::new(out_dir(cli, "gradcheck"))?;
    rec.write("gradcheck.json", &to_json_bytes(&report))?;
    rec.finish(
        "gradcheck",
        serde_json::to_value(&config)?,
        seeds(&[("gradcheck", config.seed)]),
    )?;
    say(
        cli,
        format!(
            "{}: {} checks, max relative error {:.3e} (tolerance {:.0e})",
            if report.passed { "PASS" } else { "FAIL" },
            report.checks.len(),
            report.max_rel_error,
            report.tolerance
        ),
    );
    Ok(if report.passed { 0 } else { 1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub tau: f64,
    pub adapter: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

/// Run settings for one grid value. `K = 0` is the baseline: no
/// structure term and no adaptation.
pub fn sweep_spec(
    base: &TrainConfig,
    param: SweepParam,
    value: f64,
    topk: usize,
) -> Result<RunSpec> {
    let mut train = base.clone();
    let mut adapter = "sas".to_string();
    let mut params = AdapterParams {
        k: base.k,
        tau: base.tau_scl,
    };
    match param {
        SweepParam::K => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(usage(format!(
                    "K must be a non-negative integer, got {value}"
                )));
            }
            if value == 0.0 {
                train.lambda = 0.0;
                adapter = "none".into();
            } else {
                train.k = value as usize;
                params.k = value as usize;
            }
        }
        SweepParam::Lambda => train.lambda = value,
        SweepParam::Tau => {
            train.tau_scl = value;
            params.tau = value;
        }
    }
    Ok(RunSpec {
        train,
        adapter,
        adapter_params: params,
        eval_k: topk,
    })
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<i32> {
    if args.topk == 0 {
        return Err(usage("--topk must be at least 1"));
    }
    let mut rec = Recorder::new(out_dir(cli, "sweep"))?;
    let bench = open_bench(&mut rec, &args.bench)?;
    let mut base: TrainConfig = match &cli.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    base.d = bench.dataset.d;
    if let Some(v) = cli.seed {
        base.seed = v;
    }
    base.validate()?;
    let values = args
        .values
        .clone()
        .unwrap_or_else(|| args.param.default_grid());
    if values.is_empty() {
        return Err(usage("--values is empty"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in &values {
        let spec = sweep_spec(&base, args.param, value, args.topk)?;
        let out = pipeline::run(bench.view(), &spec)?;
        say(
            cli,
            format!("{:?} = {value}: {}", args.param, summary(&out.metrics)),
        );
        rows.push(SweepRow {
            value,
            lambda: spec.train.lambda,
            k: if spec.adapter == "none" {
                0
            } else {
                spec.adapter_params.k
            },
            tau: spec.adapter_params.tau,
            adapter: spec.adapter,
            metrics: out.metrics,
        });
    }
    let report = SweepReport {
        param: args.param,
        values,
        rows,
    };
    rec.write("sweep.json", &to_json_bytes(&report))?;
    rec.finish(
        "sweep",
        json!({"param": args.param, "topk": args.topk, "base": base}),
        seeds(&[("train", base.seed)]),
    )?;
    Ok(0)
}
