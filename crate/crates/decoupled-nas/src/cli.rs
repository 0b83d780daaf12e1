//! Command-line surface for scripted, reproducible runs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config failure.
//! Every mutating command works inside a single run directory (`--out`),
//! guarded by a lock file; nothing outside that directory is written.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analytics::{export_dot, export_heatmap_csv, Snapshot};
use crate::searchspace::{CellKind, CellTemplate, OperationKind};
use crate::trainer::{
    load_checkpoint, metrics_to_csv, save_checkpoint, Derived, SearchConfig, TrainerState,
};

#[derive(Debug, Parser)]
#[command(name = "dnas", about = "Decoupled cell-search engine", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Template selector shared by the space-inspection commands.
#[derive(Debug, Args)]
pub struct TemplateArgs {
    /// Cell family: "conv" or "recurrent".
    #[arg(long)]
    pub cell: String,
    /// Total nodes (conv) or hidden nodes (recurrent).
    #[arg(long)]
    pub nodes: usize,
    /// Comma-separated operation names; defaults to the full set.
    #[arg(long)]
    pub ops: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full policy-gradient search and write all artifacts.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Same budget as `search`, but policies stay uniform.
    RandomBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a checkpointed run to its configured epoch count.
    Resume {
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-derive the final architecture from the latest checkpoint.
    Derive {
        #[arg(long)]
        out: PathBuf,
        /// Candidate count; defaults to the configured value.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Print the exact architecture count of a cell space.
    Count {
        #[command(flatten)]
        template: TemplateArgs,
    },
    /// Print every architecture of a small space, one encoding per line.
    Enumerate {
        #[command(flatten)]
        template: TemplateArgs,
        #[arg(long, default_value_t = 100_000)]
        limit: u64,
    },
    /// Export sampling-ledger CSVs from a finished run.
    Stats {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write graph files for the derived architecture of a run.
    ExportDot {
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> CliError {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Exclusive ownership of a run directory for the process lifetime.
#[derive(Debug)]
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<RunLock, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::runtime(
                format!("run directory {} is locked by another process", dir.display()),
            )),
            Err(e) => Err(CliError::runtime(format!("cannot lock: {e}"))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn parse_template(args: &TemplateArgs) -> Result<CellTemplate, CliError> {
    let ops = match (&args.ops, args.cell.as_str()) {
        (Some(list), _) => list
            .split(',')
            .map(|s| OperationKind::parse(s.trim()).map_err(|e| CliError::usage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?,
        (None, "conv") => OperationKind::conv_set(),
        (None, _) => OperationKind::recurrent_set(),
    };
    match args.cell.as_str() {
        "conv" => CellTemplate::conv(CellKind::ConvNormal, args.nodes, ops)
            .map_err(|e| CliError::usage(e.to_string())),
        "recurrent" => {
            CellTemplate::recurrent(args.nodes, ops).map_err(|e| CliError::usage(e.to_string()))
        }
        other => Err(CliError::usage(format!(
            "unknown cell family {other:?}; expected \"conv\" or \"recurrent\""
        ))),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<SearchConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = SearchConfig::from_toml(&text).map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::runtime(format!("mkdir {}: {e}", parent.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| CliError::runtime(format!("write {}: {e}", path.display())))
}

fn write_snapshot(dir: &Path, snapshot: &Snapshot) -> Result<(), CliError> {
    for hm in export_heatmap_csv(snapshot) {
        let base = dir
            .join("snapshots")
            .join(format!("epoch_{:05}_{}", snapshot.epoch, hm.kind.name()));
        write(&base.with_extension("edges.csv"), &hm.edges)?;
        write(&base.with_extension("nodes.csv"), &hm.nodes)?;
    }
    Ok(())
}

fn write_derived(dir: &Path, state: &TrainerState, derived: &Derived) -> Result<(), CliError> {
    let encodings: Vec<String> = derived.samples.iter().map(|s| s.encode()).collect();
    write(
        &dir.join("derived").join("architecture.txt"),
        &(encodings.join("\n") + "\n"),
    )?;
    write(
        &dir.join("derived").join("reward.txt"),
        &format!("{:?}\n", derived.reward),
    )?;
    for sample in &derived.samples {
        let template = state
            .policies
            .templates
            .get(&sample.kind)
            .ok_or_else(|| CliError::runtime("missing template for derived sample"))?;
        let dot = export_dot(sample, template).map_err(|e| CliError::runtime(e.to_string()))?;
        write(
            &dir.join("derived").join(format!("{}.dot", sample.kind.name())),
            &dot,
        )?;
    }
    Ok(())
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:05}.json"))
}

fn latest_checkpoint(dir: &Path) -> Result<PathBuf, CliError> {
    let ck_dir = dir.join("checkpoints");
    let mut paths: Vec<PathBuf> = fs::read_dir(&ck_dir)
        .map_err(|e| CliError::usage(format!("no checkpoints in {}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .pop()
        .ok_or_else(|| CliError::usage(format!("no checkpoints in {}", ck_dir.display())))
}

/// Epoch loop with periodic checkpoints, then derivation and artifacts.
fn drive(state: &mut TrainerState, dir: &Path) -> Result<(), CliError> {
    let started = std::time::Instant::now();
    let run_err = |e: crate::trainer::TrainerError| CliError::runtime(e.to_string());
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)
        .map_err(|e| CliError::runtime(format!("mkdir {}: {e}", ck_dir.display())))?;
    let cadence = state.config.snapshot_every.max(1);
    while state.epoch < state.config.epochs {
        state.run_epoch().map_err(run_err)?;
        if state.epoch % cadence == 0 || state.epoch == state.config.epochs {
            save_checkpoint(state, &checkpoint_path(dir, state.epoch)).map_err(run_err)?;
        }
    }
    save_checkpoint(state, &checkpoint_path(dir, state.epoch)).map_err(run_err)?;
    let derived = state
        .derive_architecture(state.config.derivation_samples.max(1))
        .map_err(run_err)?;
    write_derived(dir, state, &derived)?;
    for snapshot in &state.snapshots {
        write_snapshot(dir, snapshot)?;
    }
    write(
        &dir.join("metrics.csv"),
        &metrics_to_csv(&state.metrics, started.elapsed().as_millis()),
    )?;
    write(&dir.join("ledger.csv"), &state.ledger.to_csv())?;
    Ok(())
}

fn cmd_search(
    config: &Path,
    seed: Option<u64>,
    out: &Path,
    random: bool,
) -> Result<(), CliError> {
    let config = load_config(config, seed)?;
    let _lock = RunLock::acquire(out)?;
    write(&out.join("config.toml"), &config.to_toml())?;
    let mut state =
        TrainerState::new(config).map_err(|e| CliError::usage(e.to_string()))?;
    state.random_mode = random;
    drive(&mut state, out)
}

fn cmd_resume(out: &Path) -> Result<(), CliError> {
    let ck = latest_checkpoint(out)?;
    let mut state = load_checkpoint(&ck).map_err(|e| CliError::runtime(e.to_string()))?;
    let _lock = RunLock::acquire(out)?;
    drive(&mut state, out)
}

fn cmd_derive(out: &Path, samples: Option<usize>) -> Result<(), CliError> {
    let ck = latest_checkpoint(out)?;
    let mut state = load_checkpoint(&ck).map_err(|e| CliError::runtime(e.to_string()))?;
    let _lock = RunLock::acquire(out)?;
    let n = samples.unwrap_or(state.config.derivation_samples).max(1);
    let derived = state
        .derive_architecture(n)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    write_derived(out, &state, &derived)
}

fn cmd_stats(out: &Path) -> Result<(), CliError> {
    let ck = latest_checkpoint(out)?;
    let state = load_checkpoint(&ck).map_err(|e| CliError::runtime(e.to_string()))?;
    write(&out.join("ledger.csv"), &state.ledger.to_csv())
}

fn cmd_export_dot(out: &Path) -> Result<(), CliError> {
    let encoded = fs::read_to_string(out.join("derived").join("architecture.txt"))
        .map_err(|e| CliError::usage(format!("no derived architecture in {}: {e}", out.display())))?;
    let ck = latest_checkpoint(out)?;
    let state = load_checkpoint(&ck).map_err(|e| CliError::runtime(e.to_string()))?;
    for line in encoded.lines().filter(|l| !l.trim().is_empty()) {
        let sample = crate::searchspace::ArchitectureSample::decode(line)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let template = state
            .policies
            .templates
            .get(&sample.kind)
            .ok_or_else(|| CliError::usage("sample kind not part of this run"))?;
        let dot = export_dot(&sample, template).map_err(|e| CliError::runtime(e.to_string()))?;
        write(
            &out.join("derived").join(format!("{}.dot", sample.kind.name())),
            &dot,
        )?;
    }
    Ok(())
}

fn cmd_count(args: &TemplateArgs) -> Result<String, CliError> {
    let template = parse_template(args)?;
    let count = template.count_architectures();
    let approx: f64 = count.to_string().parse().unwrap_or(f64::INFINITY);
    Ok(format!("{count} (≈{approx:.2e})"))
}

fn cmd_enumerate(args: &TemplateArgs, limit: u64) -> Result<String, CliError> {
    let template = parse_template(args)?;
    let samples = template
        .enumerate_samples(limit)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let mut out = String::new();
    for s in &samples {
        out.push_str(&s.encode());
        out.push('\n');
    }
    Ok(out)
}

/// Execute a parsed command; stdout-producing commands return their output.
pub fn run(command: &Command) -> Result<Option<String>, CliError> {
    match command {
        Command::Search { config, seed, out } => {
            cmd_search(config, *seed, out, false).map(|_| None)
        }
        Command::RandomBaseline { config, seed, out } => {
            cmd_search(config, *seed, out, true).map(|_| None)
        }
        Command::Resume { out } => cmd_resume(out).map(|_| None),
        Command::Derive { out, samples } => cmd_derive(out, *samples).map(|_| None),
        Command::Count { template } => cmd_count(template).map(Some),
        Command::Enumerate { template, limit } => cmd_enumerate(template, *limit).map(Some),
        Command::Stats { out } => cmd_stats(out).map(|_| None),
        Command::ExportDot { out } => cmd_export_dot(out).map(|_| None),
    }
}

/// Process entry point used by the binary.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match run(&cli.command) {
        Ok(Some(output)) => {
            print!("{output}");
            if !output.ends_with('\n') {
                println!();
            }
            0
        }
        Ok(None) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
