//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration. Relative output paths are resolved against `$INFOCL_OUT`
//! when it is set.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adversarial::DeltaInit;
use crate::data::{generate_synthetic, load_corpus, split_tasks, write_corpus, Dataset, SyntheticSpec, TaskSequence};
use crate::error::{Error, Result};
use crate::mine::{measure_representation_mi, MiMode, MineConfig};
use crate::model::Model;
use crate::runner::{
    evaluate, mean_std, parse_metrics_csv, run_sequence, write_run_outputs, CeScope, MetricsReport, TrainConfig, Variant,
};

pub const OUT_ENV: &str = "INFOCL_OUT";

#[derive(Debug, Parser)]
#[command(name = "infocl", version, about = "Continual text classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic analogous-class corpus.
    GenData(GenDataArgs),
    /// Split a corpus's classes into tasks.
    Split(SplitArgs),
    /// Train over a task sequence, one run per seed.
    Train(TrainArgs),
    /// Accuracy of a trained run on its test data.
    Evaluate(EvaluateArgs),
    /// Run ablated variants over several seeds.
    Ablate(AblateArgs),
    /// Mutual-information estimates for a trained run.
    Mi(MiArgs),
    /// Aggregate metrics over run directories.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// `default` or a JSON file with generator fields.
    #[arg(long, default_value = "default")]
    pub spec: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train file; `.test.jsonl` and `.meta.json` siblings are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub tasks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where examples and the task split come from.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Train corpus (JSONL). Without it the default synthetic benchmark is generated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generator seed for the default synthetic benchmark.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Task split file. Without it classes are split with the run seed.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub tasks: usize,
}

/// One flag per configuration field; explicit flags override `--config`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ConfigArgs {
    /// Slow-encoder momentum.
    #[arg(long, default_value_t = 0.99)]
    pub momentum: f64,
    /// Fast-slow contrast temperature.
    #[arg(long, default_value_t = 0.05)]
    pub tau_fs: f64,
    /// Current-past contrast temperature.
    #[arg(long, default_value_t = 0.05)]
    pub tau_cp: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lambda_fs: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lambda_cp: f64,
    #[arg(long, default_value_t = 512)]
    pub queue_capacity: usize,
    /// Exemplars per class.
    #[arg(long, default_value_t = 10)]
    pub memory_budget: usize,
    #[arg(long, default_value_t = 2)]
    pub adv_steps: usize,
    #[arg(long, default_value_t = 0.3)]
    pub adv_radius: f64,
    #[arg(long, default_value_t = 0.1)]
    pub adv_step_size: f64,
    /// zero or uniform.
    #[arg(long, default_value_t = DeltaInit::Zero)]
    pub adv_init: DeltaInit,
    #[arg(long, default_value_t = 1e-2)]
    pub lr_encoder: f64,
    #[arg(long, default_value_t = 1e-1)]
    pub lr_classifier: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs_new: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs_replay: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// First run seed; `--seeds n` uses seed, seed+1, ...
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub no_fs: bool,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub no_cp: bool,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub no_adv: bool,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub finetune_only: bool,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub replay_only: bool,
    /// all-seen or current-task.
    #[arg(long, default_value_t = CeScope::AllSeen)]
    pub ce_scope: CeScope,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub rep_dim: usize,
    /// Estimate I(Z;Y) and I(X;Z) at the end of each run.
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub measure_mi: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Flat JSON file with configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub params: ConfigArgs,
    #[arg(long, default_value_t = 1)]
    pub seeds: usize,
    /// Re-run exactly what a manifest describes; data and config flags are ignored.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub params: ConfigArgs,
    /// Variant to run: full, no-fs, no-cp, no-adv, replay-only, finetune-only. Repeatable.
    #[arg(long = "flag", required = true, value_parser = parse_variant)]
    pub flags: Vec<Variant>,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory holding manifest.json, split.json and checkpoint.json.
    #[arg(long)]
    pub run: PathBuf,
}

#[derive(Debug, Args)]
pub struct MiArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// representation-label, input-representation or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
    #[arg(long, default_value_t = 60)]
    pub mine_epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub mine_hidden: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub mine_lr: f64,
    #[arg(long, default_value_t = 0)]
    pub mine_seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories to aggregate.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Baseline run directories; adds baseline and delta columns.
    #[arg(long, num_args = 1..)]
    pub baseline: Vec<PathBuf>,
    /// Output CSV; the analogous-class table goes to `<stem>.analogous.csv`.
    /// Without it both tables are printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant `{s}`; expected one of {}", names.join(", "))
    })
}

/// Where a run's data came from, enough to rebuild it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    pub split: Option<PathBuf>,
    pub tasks: usize,
}

/// Written before training; `train --manifest` replays it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    pub data: DataSource,
    pub output: PathBuf,
    pub seeds: Vec<u64>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    match dispatch(cli.command, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 3,
        _ => 1,
    }
}

fn dispatch(command: Command, matches: &ArgMatches) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Split(a) => split(&a),
        Command::Train(a) => train(&a, matches),
        Command::Evaluate(a) => evaluate_run(&a),
        Command::Ablate(a) => ablate(&a, matches),
        Command::Mi(a) => mi(&a),
        Command::Report(a) => report(&a),
    }
}

/// Resolves `path` against `$INFOCL_OUT`; absolute paths pass through.
pub fn output_path(path: Option<&Path>, default_name: &str) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from);
    match (root, path) {
        (Some(root), Some(p)) => root.join(p),
        (Some(root), None) => root.join(default_name),
        (None, Some(p)) => p.to_path_buf(),
        (None, None) => PathBuf::from("runs").join(default_name),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p).map_err(|e| Error::io(p, e)),
        _ => Ok(()),
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

fn load_spec(spec: &str) -> Result<SyntheticSpec> {
    if spec == "default" {
        return Ok(SyntheticSpec::default());
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{spec}: {e}")))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: a.seed,
        ..load_spec(&a.spec)?
    };
    let data = generate_synthetic(&spec)?;
    let out = output_path(Some(&a.out), "corpus.jsonl");
    create_parent(&out)?;
    write_corpus(&out, &data, Some(&spec))?;
    println!(
        "wrote {} train and {} test examples to {}",
        data.train.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let data = load_corpus(&a.data)?;
    let seq = split_tasks(&data.classes(), a.tasks, a.seed, &data.analogous_pairs)?;
    let out = output_path(Some(&a.out), "split.json");
    create_parent(&out)?;
    seq.save(&out)?;
    println!("wrote {} tasks to {}", seq.len(), out.display());
    Ok(())
}

/// Defaults, then the config file, then flags given on the command line.
pub fn resolve_config(matches: &ArgMatches, params: &ConfigArgs, file: Option<&Path>) -> Result<TrainConfig> {
    let base = match file {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut merged = serde_json::to_value(base)?;
    let flags = serde_json::to_value(params)?;
    let (Some(m), Some(f)) = (merged.as_object_mut(), flags.as_object()) else {
        return Err(Error::contract("configuration must serialize to an object"));
    };
    for (key, value) in f {
        if matches.value_source(key) == Some(ValueSource::CommandLine) {
            m.insert(key.clone(), value.clone());
        }
    }
    let config: TrainConfig = serde_json::from_value(merged).map_err(|e| Error::config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn data_source(a: &DataArgs) -> Result<DataSource> {
    Ok(DataSource {
        path: a.data.as_deref().map(absolute).transpose()?,
        synthetic: match a.data {
            Some(_) => None,
            None => Some(SyntheticSpec {
                seed: a.data_seed,
                ..SyntheticSpec::default()
            }),
        },
        split: a.split.as_deref().map(absolute).transpose()?,
        tasks: a.tasks,
    })
}

pub fn load_source(src: &DataSource) -> Result<Dataset> {
    match (&src.path, &src.synthetic) {
        (Some(p), _) => load_corpus(p),
        (None, Some(spec)) => generate_synthetic(spec),
        (None, None) => Err(Error::config("data source names neither a corpus nor a generator")),
    }
}

fn sequence_for(src: &DataSource, data: &Dataset, seed: u64) -> Result<TaskSequence> {
    match &src.split {
        Some(p) => TaskSequence::load(p),
        None => split_tasks(&data.classes(), src.tasks, seed, &data.analogous_pairs),
    }
}

fn run_dir(out: &Path, seeds: &[u64], seed: u64) -> PathBuf {
    if seeds.len() == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("seed-{seed}"))
    }
}

/// Runs every seed of `manifest`, in parallel up to the machine's cores.
/// Returns the reports in seed order.
pub fn execute(manifest: &RunManifest) -> Result<Vec<MetricsReport>> {
    let data = load_source(&manifest.data)?;
    std::fs::create_dir_all(&manifest.output).map_err(|e| Error::io(&manifest.output, e))?;
    manifest.save(&manifest.output.join("manifest.json"))?;
    let seeds = &manifest.seeds;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len()).max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MetricsReport>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = run_one(manifest, &data, seeds[i]);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect()
}

fn run_one(manifest: &RunManifest, data: &Dataset, seed: u64) -> Result<MetricsReport> {
    let config = TrainConfig {
        seed,
        ..manifest.config.clone()
    };
    let dir = run_dir(&manifest.output, &manifest.seeds, seed);
    let sequence = sequence_for(&manifest.data, data, seed)?;
    if manifest.seeds.len() > 1 {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        RunManifest {
            config: config.clone(),
            output: dir.clone(),
            seeds: vec![seed],
            ..manifest.clone()
        }
        .save(&dir.join("manifest.json"))?;
    }
    let run = run_sequence(data, &sequence, &config)?;
    write_run_outputs(&dir, data, &sequence, &config, &run)?;
    log::info!("seed {seed}: final acc {:.4} in {}", run.report.final_acc(), dir.display());
    Ok(run.report)
}

fn seeds_from(first: u64, n: usize) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::config("--seeds must be at least 1"));
    }
    Ok((0..n as u64).map(|i| first + i).collect())
}

fn train(a: &TrainArgs, matches: &ArgMatches) -> Result<()> {
    let manifest = match &a.manifest {
        Some(path) => {
            let mut m = RunManifest::load(path)?;
            if let Some(out) = &a.out {
                m.output = absolute(&output_path(Some(out), "train"))?;
            }
            m
        }
        None => {
            let config = resolve_config(matches, &a.params, a.config.as_deref())?;
            RunManifest {
                command: "train".into(),
                seeds: seeds_from(config.seed, a.seeds)?,
                config,
                data: data_source(&a.data)?,
                output: absolute(&output_path(a.out.as_deref(), "train"))?,
            }
        }
    };
    let reports = execute(&manifest)?;
    if reports.len() > 1 {
        let path = manifest.output.join("aggregate.csv");
        std::fs::write(&path, aggregate_csv(&reports)?).map_err(|e| Error::io(&path, e))?;
    }
    for (seed, r) in manifest.seeds.iter().zip(&reports) {
        println!("seed {seed}: final acc {}", r.final_acc());
    }
    Ok(())
}

fn ablate(a: &AblateArgs, matches: &ArgMatches) -> Result<()> {
    let base = resolve_config(matches, &a.params, a.config.as_deref())?;
    let root = absolute(&output_path(a.out.as_deref(), "ablate"))?;
    let data = data_source(&a.data)?;
    for &variant in &a.flags {
        let manifest = RunManifest {
            command: format!("ablate --flag {}", variant.name()),
            seeds: seeds_from(base.seed, a.seeds)?,
            config: variant.apply(&base),
            data: data.clone(),
            output: root.join(variant.name()),
        };
        let reports = execute(&manifest)?;
        let path = manifest.output.join("aggregate.csv");
        std::fs::write(&path, aggregate_csv(&reports)?).map_err(|e| Error::io(&path, e))?;
        let finals: Vec<Vec<f64>> = reports.iter().map(|r| vec![r.final_acc()]).collect();
        let (m, s) = mean_std(&finals)?[0];
        println!("{}: final acc {m} ± {s} over {} seeds", variant.name(), reports.len());
    }
    Ok(())
}

/// `task,runs,acc_mean,acc_std`, one row per checkpoint.
pub fn aggregate_csv(reports: &[MetricsReport]) -> Result<String> {
    let rows: Vec<Vec<f64>> = reports.iter().map(|r| r.acc.clone()).collect();
    let stats = mean_std(&rows)?;
    let mut out = String::from("task,runs,acc_mean,acc_std\n");
    for (j, (m, s)) in stats.iter().enumerate() {
        out.push_str(&format!("{},{},{m},{s}\n", j + 1, rows.len()));
    }
    Ok(out)
}

struct RunContext {
    data: Dataset,
    sequence: TaskSequence,
    model: Model<f64>,
}

fn load_run(dir: &Path) -> Result<RunContext> {
    let manifest = RunManifest::load(&dir.join("manifest.json"))?;
    let data = load_source(&manifest.data)?;
    Ok(RunContext {
        sequence: TaskSequence::load(&dir.join("split.json"))?,
        model: Model::load_json(&dir.join("checkpoint.json"))?,
        data,
    })
}

fn evaluate_run(a: &EvaluateArgs) -> Result<()> {
    let ctx = load_run(&a.run)?;
    let seen = ctx
        .sequence
        .tasks
        .iter()
        .take_while(|t| t.iter().all(|c| ctx.model.classifier.index_of(*c).is_some()))
        .count();
    if seen == 0 {
        return Err(Error::input("the checkpoint knows none of the sequence's tasks"));
    }
    let eval = evaluate(&ctx.model, &ctx.data, &ctx.sequence, seen)?;
    println!("task,acc");
    for (i, acc) in eval.per_task.iter().enumerate() {
        println!("{},{acc}", i + 1);
    }
    println!("all,{}", eval.pooled);
    Ok(())
}

fn mi(a: &MiArgs) -> Result<()> {
    let modes: Vec<MiMode> = match a.mode.as_str() {
        "both" => vec![MiMode::RepresentationLabel, MiMode::InputRepresentation],
        "representation-label" => vec![MiMode::RepresentationLabel],
        "input-representation" => vec![MiMode::InputRepresentation],
        other => return Err(Error::config(format!("unknown MI mode `{other}`"))),
    };
    let ctx = load_run(&a.run)?;
    let config = MineConfig {
        epochs: a.mine_epochs,
        hidden: a.mine_hidden,
        learning_rate: a.mine_lr,
        seed: a.mine_seed,
        ..MineConfig::default()
    };
    let mut out = serde_json::Map::new();
    for mode in modes {
        let est = measure_representation_mi(&ctx.model.encoder, &ctx.data.test, mode, &config)?;
        let key = serde_json::to_value(mode)?.as_str().unwrap_or_default().to_string();
        out.insert(
            key,
            serde_json::json!({ "raw": est.raw, "clamped": est.clamped, "degenerate": est.degenerate }),
        );
    }
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

/// Metrics, config and analogous-class figures of one run directory.
struct RunSummary {
    acc: Vec<f64>,
    config: TrainConfig,
    drop: Option<(f64, f64, f64)>,
}

fn read_run(dir: &Path) -> Result<RunSummary> {
    let metrics = dir.join("metrics.csv");
    let text = std::fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let acc = parse_metrics_csv(&text)?;
    if acc.is_empty() {
        return Err(Error::input(format!("{} has no checkpoints", metrics.display())));
    }
    let config = TrainConfig::load(&dir.join("config.json")).map_err(|e| match e {
        Error::Config(m) => Error::input(m),
        other => other,
    })?;
    let report_path = dir.join("report.json");
    let drop = if report_path.exists() {
        let text = std::fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
        let r: MetricsReport = serde_json::from_str(&text)?;
        r.analogous
            .and_then(|a| Some((a.drop?, a.acc_after?, a.acc_final?)))
    } else {
        None
    };
    Ok(RunSummary { acc, config, drop })
}

/// Every run must share one configuration apart from the seed.
fn check_same_config(runs: &[RunSummary], what: &str) -> Result<()> {
    let strip = |c: &TrainConfig| TrainConfig { seed: 0, ..c.clone() };
    let first = strip(&runs[0].config);
    if runs.iter().any(|r| strip(&r.config) != first) {
        return Err(Error::input(format!("{what} runs were trained with different configurations")));
    }
    Ok(())
}

fn drop_row(name: &str, runs: &[RunSummary]) -> String {
    let drops: Vec<(f64, f64, f64)> = runs.iter().filter_map(|r| r.drop).collect();
    if drops.is_empty() {
        return format!("{name},0,,,,\n");
    }
    let cols: Vec<Vec<f64>> = drops.iter().map(|&(d, a, f)| vec![d, a, f]).collect();
    let s = mean_std(&cols).expect("equal widths");
    format!("{name},{},{},{},{},{}\n", drops.len(), s[0].0, s[0].1, s[1].0, s[2].0)
}

fn report(a: &ReportArgs) -> Result<()> {
    let runs = a.runs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
    check_same_config(&runs, "aggregated")?;
    let stats = mean_std(&runs.iter().map(|r| r.acc.clone()).collect::<Vec<_>>())?;
    let base = if a.baseline.is_empty() {
        None
    } else {
        let b = a.baseline.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
        check_same_config(&b, "baseline")?;
        let s = mean_std(&b.iter().map(|r| r.acc.clone()).collect::<Vec<_>>())?;
        if s.len() != stats.len() {
            return Err(Error::input("baseline runs have a different number of checkpoints"));
        }
        Some((b, s))
    };
    let mut main = String::from("task,runs,acc_mean,acc_std");
    if base.is_some() {
        main.push_str(",baseline_mean,baseline_std,delta");
    }
    main.push('\n');
    for (j, (m, s)) in stats.iter().enumerate() {
        main.push_str(&format!("{},{},{m},{s}", j + 1, runs.len()));
        if let Some((_, bs)) = &base {
            let (bm, bsd) = bs[j];
            main.push_str(&format!(",{bm},{bsd},{}", m - bm));
        }
        main.push('\n');
    }
    let mut analogous = String::from("group,runs,drop_mean,drop_std,acc_after_mean,acc_final_mean\n");
    analogous.push_str(&drop_row("runs", &runs));
    if let Some((b, _)) = &base {
        analogous.push_str(&drop_row("baseline", b));
    }
    match &a.out {
        Some(out) => {
            let out = output_path(Some(out), "report.csv");
            create_parent(&out)?;
            std::fs::write(&out, &main).map_err(|e| Error::io(&out, e))?;
            let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let side = out.with_file_name(format!("{stem}.analogous.csv"));
            std::fs::write(&side, &analogous).map_err(|e| Error::io(&side, e))?;
        }
        None => print!("{main}\n{analogous}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> (TrainArgs, ArgMatches) {
        let matches = Cli::command().try_get_matches_from(args).unwrap();
        let cli = Cli::from_arg_matches(&matches).unwrap();
        let sub = matches.subcommand().unwrap().1.clone();
        match cli.command {
            Command::Train(a) => (a, sub),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flag_defaults_match_config_defaults() {
        let (a, _) = parse(&["infocl", "train"]);
        assert_eq!(
            serde_json::to_value(&a.params).unwrap(),
            serde_json::to_value(TrainConfig::default()).unwrap()
        );
    }

    #[test]
    fn help_lists_every_field_with_its_default() {
        let mut cmd = Cli::command();
        let help = cmd
            .find_subcommand_mut("train")
            .unwrap()
            .render_long_help()
            .to_string();
        let defaults = serde_json::to_value(TrainConfig::default()).unwrap();
        for (key, value) in defaults.as_object().unwrap() {
            let flag = format!("--{}", key.replace('_', "-"));
            let at = help.find(&flag).unwrap_or_else(|| panic!("{flag} missing from help"));
            let shown = match value {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let rest = &help[at..];
            let end = rest.find("\n  -").unwrap_or(rest.len());
            let default = format!("[default: {shown}]");
            let section = &rest[..end];
            let numeric_equal = section
                .split("[default: ")
                .nth(1)
                .and_then(|s| s.split(']').next())
                .and_then(|s| s.parse::<f64>().ok())
                .zip(value.as_f64())
                .is_some_and(|(a, b)| a == b);
            assert!(
                section.contains(&default) || numeric_equal,
                "{flag}: expected {default} in {section}"
            );
        }
    }

    #[test]
    fn precedence_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"memory_budget": 5, "lambda_fs": 0.2}"#).unwrap();
        let (a, m) = parse(&["infocl", "train", "--lambda-fs", "0.3", "--no-fs"]);
        let c = resolve_config(&m, &a.params, Some(&file)).unwrap();
        assert_eq!(c.memory_budget, 5);
        assert_eq!(c.lambda_fs, 0.3);
        assert!(c.no_fs);
        assert_eq!(c.momentum, 0.99);
        let (a, m) = parse(&["infocl", "train", "--memory-budget", "10"]);
        let c = resolve_config(&m, &a.params, Some(&file)).unwrap();
        assert_eq!(c.memory_budget, 10);
    }

    #[test]
    fn invalid_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"memroy_budget": 5}"#).unwrap();
        let (a, m) = parse(&["infocl", "train"]);
        let e = resolve_config(&m, &a.params, Some(&file)).unwrap_err();
        assert_eq!(exit_code(&e), 3);
        let (a, m) = parse(&["infocl", "train", "--momentum", "2"]);
        assert_eq!(exit_code(&resolve_config(&m, &a.params, None).unwrap_err()), 3);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["infocl", "train", "--no-such-flag"]), 2);
        assert_eq!(run(["infocl", "frobnicate"]), 2);
        assert_eq!(run(["infocl", "ablate", "--flag", "no-such-variant"]), 2);
    }
}
