//! Command-line workflows: train, prune, scratch-retrain, copycat scaling,
//! cost counting, and inference benchmarking. Every command writes a run
//! manifest listing its resolved configuration and artifacts, sufficient to
//! re-run it identically.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::accounting;
use crate::arch::{
    extract_profile, make_copycat, make_densenet_bc, make_resnet, make_wrn, ArchDescriptor,
    ProfileVector,
};
use crate::bench::{bench_inference, compare, comparison_csv, BenchReport};
use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{load_cifar10, make_synthetic, DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::net::{BuildMode, Network};
use crate::prune::{prune_and_tune, PruneConfig, PruneMethod, PruneStatus, StopCondition};
use crate::train::{evaluate, train, TrainConfig};

pub const DATA_ROOT_ENV: &str = "PRUNEKIT_DATA";

const BUILTIN_FIXTURES: &[(&str, &str)] = &[
    ("wrn-40-2", include_str!("../fixtures/wrn-40-2.json")),
    ("resnet9", include_str!("../fixtures/resnet9.json")),
    ("resnet18", include_str!("../fixtures/resnet18.json")),
    ("resnet34", include_str!("../fixtures/resnet34.json")),
    ("densenet-bc-100-12", include_str!("../fixtures/densenet-bc-100-12.json")),
];

/// A builtin descriptor fixture by name.
pub fn builtin_descriptor(name: &str) -> Result<ArchDescriptor> {
    for (n, body) in BUILTIN_FIXTURES {
        if *n == name {
            return ArchDescriptor::from_json(body);
        }
    }
    let known: Vec<&str> = BUILTIN_FIXTURES.iter().map(|(n, _)| *n).collect();
    Err(Error::Config(format!(
        "unknown builtin {name:?}; available: {}",
        known.join(", ")
    )))
}

pub fn builtin_names() -> Vec<&'static str> {
    BUILTIN_FIXTURES.iter().map(|(n, _)| *n).collect()
}

#[derive(Debug, Parser)]
#[command(name = "prunekit", version, about = "Train, prune, scale, count, and benchmark small convolutional networks")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network from scratch and write a checkpoint.
    Train(TrainCmd),
    /// Prune-and-tune a trained checkpoint, recording a trajectory.
    Prune(PruneCmd),
    /// Train the compacted architecture of a profile from scratch.
    Scratch(ScratchCmd),
    /// Scale a pruning profile into a family of descriptors.
    Copycat(CopycatCmd),
    /// Count parameters and MACs of a descriptor.
    Count(CountCmd),
    /// Benchmark single-image inference latency of checkpoints.
    Bench(BenchCmd),
}

#[derive(Debug, Clone, Args)]
struct ArchArgs {
    /// Architecture family: wrn | densenet-bc | resnet.
    #[arg(long)]
    arch: Option<String>,
    /// Depth (wrn: 6n+4; densenet-bc: 6n+4; resnet: 9|18|34).
    #[arg(long)]
    depth: Option<usize>,
    /// WRN width multiplier.
    #[arg(long, default_value_t = 1.0)]
    width: f64,
    /// WRN uniform bottleneck multiplier z in (0,1].
    #[arg(long, default_value_t = 1.0)]
    bottleneck: f64,
    /// DenseNet growth rate.
    #[arg(long, default_value_t = 12)]
    growth: usize,
    /// DenseNet transition (compression) rate.
    #[arg(long, default_value_t = 0.5)]
    transition: f64,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Load the architecture from a descriptor JSON instead.
    #[arg(long, conflicts_with = "arch")]
    descriptor: Option<PathBuf>,
}

impl ArchArgs {
    fn resolve(&self) -> Result<ArchDescriptor> {
        if let Some(path) = &self.descriptor {
            return ArchDescriptor::from_json(&std::fs::read_to_string(path).map_err(|e| {
                Error::Format(format!("{}: {e}", path.display()))
            })?);
        }
        let arch = self.arch.as_deref().ok_or_else(|| {
            Error::Config("missing --arch (or --descriptor); expected wrn, densenet-bc, or resnet".into())
        })?;
        let depth = self
            .depth
            .ok_or_else(|| Error::Config("missing --depth".into()))?;
        let mut desc = match arch {
            "wrn" => make_wrn(depth, self.width, self.bottleneck)?,
            "densenet-bc" => make_densenet_bc(depth, self.growth, self.transition)?,
            "resnet" => make_resnet(depth, self.classes, self.resolution)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown --arch {other:?}; expected wrn, densenet-bc, or resnet"
                )))
            }
        };
        desc.classes = self.classes;
        desc.input_resolution = self.resolution;
        desc.validate()?;
        Ok(desc)
    }
}

#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// Dataset: synthetic | cifar10.
    #[arg(long, default_value = "synthetic")]
    data: String,
    /// Directory holding the CIFAR-10 binary batch files
    /// (default: $PRUNEKIT_DATA).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Synthetic: training images per class.
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    /// Synthetic generator seed.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Class-balanced subset sizes (applies to cifar10).
    #[arg(long)]
    subset_train: Option<usize>,
    #[arg(long)]
    subset_test: Option<usize>,
    #[arg(long, default_value_t = 0)]
    subset_seed: u64,
}

impl DataArgs {
    fn resolve(&self, resolution: usize, classes: usize) -> Result<DatasetHandle> {
        let handle = match self.data.as_str() {
            "synthetic" => make_synthetic(classes, self.per_class, resolution, self.data_seed)?,
            "cifar10" => {
                let root = self
                    .data_root
                    .clone()
                    .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "cifar10 needs --data-root or ${DATA_ROOT_ENV}"
                        ))
                    })?;
                load_cifar10(&root)?
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown --data {other:?}; expected synthetic or cifar10"
                )))
            }
        };
        match (self.subset_train, self.subset_test) {
            (None, None) => Ok(handle),
            (train, test) => handle.subset(
                self.subset_seed,
                train.unwrap_or_else(|| handle.len(Split::Train)),
                test.unwrap_or_else(|| handle.len(Split::Test)),
            ),
        }
    }
}

#[derive(Debug, Clone, Args)]
struct FitArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Comma-separated epochs at which the LR decays.
    #[arg(long, default_value = "15,23")]
    milestones: String,
    #[arg(long, default_value_t = 0.2)]
    lr_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    /// Disable crop/flip augmentation.
    #[arg(long)]
    no_augment: bool,
}

impl FitArgs {
    fn to_config(&self, seed: u64) -> Result<TrainConfig> {
        let milestones: Vec<usize> = if self.milestones.trim().is_empty() {
            Vec::new()
        } else {
            self.milestones
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad milestone {s:?}")))
                })
                .collect::<Result<_>>()?
        };
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            milestones,
            decay_factor: self.lr_decay,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed,
            augment: !self.no_augment,
            deterministic: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PruneCmd {
    /// Directory of a checkpoint written by `train` or `scratch`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Saliency method: l1 | fisher.
    #[arg(long)]
    method: String,
    /// Stop after this many pruning events.
    #[arg(long)]
    events: Option<usize>,
    /// Stop at or below this parameter count.
    #[arg(long)]
    target_params: Option<u64>,
    /// Prune until every block has at most this many live channels.
    #[arg(long)]
    to_floor: Option<usize>,
    /// Fine-tune steps between removals.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Fine-tune LR (default: the checkpoint's lowest training LR).
    #[arg(long)]
    fine_tune_lr: Option<f64>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long)]
    no_augment: bool,
    /// Parameter budgets at which to emit compacted checkpoints (repeat).
    #[arg(long)]
    budget: Vec<u64>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScratchCmd {
    /// Profile JSON produced by `prune`.
    #[arg(long)]
    profile: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CopycatCmd {
    /// Profile JSON produced by `prune`.
    #[arg(long)]
    profile: PathBuf,
    /// Scale factors (repeat).
    #[arg(long, required = true)]
    alpha: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CountCmd {
    /// Builtin descriptor name (wrn-40-2, resnet9, resnet18, resnet34,
    /// densenet-bc-100-12).
    #[arg(long, conflicts_with = "descriptor")]
    builtin: Option<String>,
    /// Descriptor JSON file.
    #[arg(long)]
    descriptor: Option<PathBuf>,
    /// Override the descriptor's input resolution.
    #[arg(long)]
    resolution: Option<usize>,
    /// Override the descriptor's class count.
    #[arg(long)]
    classes: Option<usize>,
    /// Also write the report under this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchCmd {
    /// Checkpoint directories to benchmark (repeat).
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Allow multi-threaded kernels inside the timed region.
    #[arg(long)]
    parallel: bool,
    /// Additionally benchmark the compacted form of each checkpoint.
    #[arg(long)]
    also_compacted: bool,
    #[arg(long)]
    out: PathBuf,
}

/// Everything needed to reproduce a run: the exact argv, the resolved
/// configuration, and the artifacts written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub tool_version: String,
    pub timestamp_unix: u64,
    pub notes: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, argv: &[String], config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            argv: argv.to_vec(),
            config,
            seed,
            artifacts: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timestamp_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            notes: Vec::new(),
        }
    }

    fn write(&self, out_dir: &Path) -> Result<()> {
        std::fs::write(
            out_dir.join("manifest.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

fn write_artifact(manifest: &mut RunManifest, out: &Path, rel: &str, body: &str) -> Result<()> {
    let path = out.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, body)?;
    manifest.artifacts.push(rel.to_string());
    Ok(())
}

fn load_profile(path: &Path) -> Result<ProfileVector> {
    ProfileVector::from_json(&std::fs::read_to_string(path).map_err(|e| {
        Error::Format(format!("{}: {e}", path.display()))
    })?)
}

// ── Command implementations ─────────────────────────────────────────

fn cmd_train(cmd: &TrainCmd, argv: &[String]) -> Result<()> {
    let desc = cmd.arch.resolve()?;
    let data = cmd.data.resolve(desc.input_resolution, desc.classes)?;
    let cfg = cmd.fit.to_config(cmd.seed)?;
    std::fs::create_dir_all(&cmd.out)?;
    let mut manifest = RunManifest::new("train", argv, serde_json::to_value(&cfg)?, cmd.seed);

    let mut network = Network::build(&desc, BuildMode::Compacted, cmd.seed)?;
    let log = train(&mut network, &cfg, &data)?;

    write_artifact(&mut manifest, &cmd.out, "epochs.csv", &log.to_csv())?;
    let meta = CheckpointMeta {
        label: desc.name(),
        final_test_error: log.final_error(),
        final_lr: Some(cfg.final_lr()),
        seed: Some(cmd.seed),
    };
    let ckpt = checkpoint::checkpoint_dir(&cmd.out);
    checkpoint::save(&ckpt, &network, &meta)?;
    manifest.artifacts.push("checkpoint/manifest.json".into());
    manifest.artifacts.push("checkpoint/weights.bin".into());
    manifest.write(&cmd.out)?;
    println!(
        "trained {} ({} params): final test error {:.2}%",
        desc.name(),
        network.active_param_count(),
        log.final_error().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_prune(cmd: &PruneCmd, argv: &[String]) -> Result<()> {
    let (network, meta) = checkpoint::load(&cmd.checkpoint)?;
    let desc = network.descriptor.clone();
    let data = cmd.data.resolve(desc.input_resolution, desc.classes)?;
    let method = match cmd.method.as_str() {
        "l1" => PruneMethod::L1,
        "fisher" => PruneMethod::Fisher,
        other => {
            return Err(Error::Config(format!(
                "unknown --method {other:?}; expected l1 or fisher"
            )))
        }
    };
    let stop = match (cmd.events, cmd.target_params, cmd.to_floor) {
        (Some(n), None, None) => StopCondition::ChannelsPruned(n),
        (None, Some(p), None) => StopCondition::TargetParams(p),
        (None, None, Some(f)) => StopCondition::BlockFloor(f),
        (None, None, None) => {
            return Err(Error::Config(
                "specify a stop condition: --events, --target-params, or --to-floor".into(),
            ))
        }
        _ => {
            return Err(Error::Config(
                "stop conditions are mutually exclusive; give exactly one".into(),
            ))
        }
    };
    let config = PruneConfig {
        method,
        steps_between_prunes: cmd.steps,
        fine_tune_lr: cmd.fine_tune_lr.or(meta.final_lr).unwrap_or(0.004),
        batch: cmd.batch,
        momentum: cmd.momentum,
        weight_decay: cmd.weight_decay,
        seed: cmd.seed,
        augment: !cmd.no_augment,
        stop,
        budgets: cmd.budget.clone(),
    };
    std::fs::create_dir_all(&cmd.out)?;
    let mut manifest = RunManifest::new("prune", argv, serde_json::to_value(&config)?, cmd.seed);

    let mut evaluator = |net: &Network| evaluate(net, &data, Split::Test);
    let outcome = prune_and_tune(network, &config, &data, &mut evaluator)?;

    write_artifact(&mut manifest, &cmd.out, "trajectory.csv", &outcome.trajectory.to_csv())?;
    let final_profile = extract_profile(&outcome.network);
    write_artifact(&mut manifest, &cmd.out, "profile.json", &final_profile.to_json()?)?;

    for snap in &outcome.snapshots {
        let rel = format!("budget_{}", snap.requested);
        let profile = extract_profile(&snap.network);
        write_artifact(&mut manifest, &cmd.out, &format!("{rel}/profile.json"), &profile.to_json()?)?;
        let last_error = outcome
            .trajectory
            .entries
            .iter()
            .find(|e| e.event == snap.event)
            .map(|e| e.test_error_percent);
        let snap_meta = CheckpointMeta {
            label: format!("{}-{}-{}", desc.name(), config.method, snap.achieved_params),
            final_test_error: last_error,
            final_lr: Some(config.fine_tune_lr),
            seed: Some(cmd.seed),
        };
        let dir = cmd.out.join(&rel).join("checkpoint");
        checkpoint::save(&dir, &snap.network, &snap_meta)?;
        manifest.artifacts.push(format!("{rel}/checkpoint/manifest.json"));
        manifest.artifacts.push(format!("{rel}/checkpoint/weights.bin"));
    }
    // the final (masked) state, reusable for further pruning
    let final_meta = CheckpointMeta {
        label: format!("{}-{}-final", desc.name(), config.method),
        final_test_error: outcome.trajectory.entries.last().map(|e| e.test_error_percent),
        final_lr: Some(config.fine_tune_lr),
        seed: Some(cmd.seed),
    };
    checkpoint::save(&checkpoint::checkpoint_dir(&cmd.out), &outcome.network, &final_meta)?;
    manifest.artifacts.push("checkpoint/manifest.json".into());
    manifest.artifacts.push("checkpoint/weights.bin".into());

    if outcome.status == PruneStatus::Exhausted {
        manifest.notes.push("stopped early: every block reached its floor".into());
        eprintln!("warning: pruning exhausted before the stop condition was met");
    }
    let reached: Vec<u64> = outcome.snapshots.iter().map(|s| s.requested).collect();
    for &b in &cmd.budget {
        if !reached.contains(&b) {
            manifest.notes.push(format!("budget {b} unreachable"));
            eprintln!("warning: budget {b} not reached");
        }
    }
    manifest.write(&cmd.out)?;
    let last = outcome.trajectory.entries.last().unwrap();
    println!(
        "pruned {} channels: {} params, test error {:.2}%",
        last.channels_pruned, last.params, last.test_error_percent
    );
    Ok(())
}

fn cmd_scratch(cmd: &ScratchCmd, argv: &[String]) -> Result<()> {
    let profile = load_profile(&cmd.profile)?;
    let desc = profile.to_descriptor();
    let data = cmd.data.resolve(desc.input_resolution, desc.classes)?;
    let cfg = cmd.fit.to_config(cmd.seed)?;
    std::fs::create_dir_all(&cmd.out)?;
    let mut manifest = RunManifest::new("scratch", argv, serde_json::to_value(&cfg)?, cmd.seed);

    let (network, log) = crate::prune::scratch_train_from_profile(&profile, &cfg, &data)?;
    write_artifact(&mut manifest, &cmd.out, "epochs.csv", &log.to_csv())?;
    let meta = CheckpointMeta {
        label: format!("{}-scratch", desc.name()),
        final_test_error: log.final_error(),
        final_lr: Some(cfg.final_lr()),
        seed: Some(cmd.seed),
    };
    checkpoint::save(&checkpoint::checkpoint_dir(&cmd.out), &network, &meta)?;
    manifest.artifacts.push("checkpoint/manifest.json".into());
    manifest.artifacts.push("checkpoint/weights.bin".into());
    manifest.write(&cmd.out)?;
    println!(
        "scratch-trained {} ({} params): final test error {:.2}%",
        desc.name(),
        network.active_param_count(),
        log.final_error().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct CopycatSummaryRow {
    alpha: f64,
    file: String,
    params: u64,
    macs: u64,
}

fn cmd_copycat(cmd: &CopycatCmd, argv: &[String]) -> Result<()> {
    for &a in &cmd.alpha {
        if a <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {a}")));
        }
    }
    let profile = load_profile(&cmd.profile)?;
    std::fs::create_dir_all(&cmd.out)?;
    let mut manifest = RunManifest::new(
        "copycat",
        argv,
        serde_json::json!({ "profile": cmd.profile.display().to_string(), "alphas": cmd.alpha }),
        0,
    );
    let mut rows = Vec::new();
    for &alpha in &cmd.alpha {
        let desc = make_copycat(&profile, alpha)?;
        let cost = accounting::cost_report(&desc)?;
        let file = format!("copycat_alpha_{alpha}.json");
        write_artifact(&mut manifest, &cmd.out, &file, &desc.to_json()?)?;
        println!(
            "alpha {alpha}: {} params, {} MACs -> {file}",
            cost.params, cost.macs
        );
        rows.push(CopycatSummaryRow { alpha, file, params: cost.params, macs: cost.macs });
    }
    write_artifact(
        &mut manifest,
        &cmd.out,
        "copycat_summary.json",
        &serde_json::to_string_pretty(&rows)?,
    )?;
    manifest.write(&cmd.out)?;
    Ok(())
}

fn cmd_count(cmd: &CountCmd, argv: &[String]) -> Result<()> {
    let mut desc = match (&cmd.builtin, &cmd.descriptor) {
        (Some(name), None) => builtin_descriptor(name)?,
        (None, Some(path)) => ArchDescriptor::from_json(&std::fs::read_to_string(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)?,
        _ => {
            return Err(Error::Config(
                "specify exactly one of --builtin or --descriptor".into(),
            ))
        }
    };
    if let Some(r) = cmd.resolution {
        desc.input_resolution = r;
    }
    if let Some(c) = cmd.classes {
        desc.classes = c;
    }
    let report = accounting::cost_report(&desc)?;
    let body = serde_json::to_string_pretty(&report)?;
    println!("{body}");
    if let Some(out) = &cmd.out {
        std::fs::create_dir_all(out)?;
        let mut manifest = RunManifest::new(
            "count",
            argv,
            serde_json::json!({ "descriptor": desc.name(), "resolution": desc.input_resolution }),
            0,
        );
        write_artifact(&mut manifest, out, &format!("count_{}.json", desc.name()), &body)?;
        manifest.write(out)?;
    }
    Ok(())
}

fn cmd_bench(cmd: &BenchCmd, argv: &[String]) -> Result<()> {
    std::fs::create_dir_all(&cmd.out)?;
    let mut manifest = RunManifest::new(
        "bench",
        argv,
        serde_json::json!({
            "warmup": cmd.warmup,
            "samples": cmd.samples,
            "parallel": cmd.parallel,
            "also_compacted": cmd.also_compacted,
        }),
        0,
    );
    let mut reports: Vec<BenchReport> = Vec::new();
    let mut errors: Vec<Option<f64>> = Vec::new();
    for path in &cmd.checkpoint {
        let (network, meta) = checkpoint::load(path)?;
        let resolution = network.descriptor.input_resolution;
        let mut report =
            bench_inference(&network, resolution, cmd.warmup, cmd.samples, cmd.parallel)?;
        if !meta.label.is_empty() {
            report.network = meta.label.clone();
        }
        reports.push(report);
        errors.push(meta.final_test_error);
        if cmd.also_compacted {
            let compacted = network.compact();
            let mut report =
                bench_inference(&compacted, resolution, cmd.warmup, cmd.samples, cmd.parallel)?;
            report.network = format!("{}-compacted", reports.last().unwrap().network);
            reports.push(report);
            errors.push(meta.final_test_error);
        }
    }
    for (i, report) in reports.iter().enumerate() {
        write_artifact(
            &mut manifest,
            &cmd.out,
            &format!("bench_{i}_{}.json", report.network),
            &serde_json::to_string_pretty(report)?,
        )?;
        println!(
            "{}: median {:.6}s, {:.3e} MACs/s",
            report.network, report.median_latency_seconds, report.throughput_macs_per_second
        );
    }
    if reports.len() >= 2 {
        let rows = compare(&reports, &errors)?;
        write_artifact(&mut manifest, &cmd.out, "comparison.csv", &comparison_csv(&rows))?;
    }
    manifest.write(&cmd.out)?;
    Ok(())
}

/// Parse and execute; returns the process exit code. Exit code 0 means
/// every requested artifact was written.
pub fn run<I>(args: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let argv: Vec<String> = args.into_iter().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/usage text
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c, &argv),
        Command::Prune(c) => cmd_prune(c, &argv),
        Command::Scratch(c) => cmd_scratch(c, &argv),
        Command::Copycat(c) => cmd_copycat(c, &argv),
        Command::Count(c) => cmd_count(c, &argv),
        Command::Bench(c) => cmd_bench(c, &argv),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_fixtures_match_their_constructors() {
        let regenerated = [
            ("wrn-40-2", make_wrn(40, 2.0, 1.0).unwrap()),
            ("resnet9", make_resnet(9, 1000, 224).unwrap()),
            ("resnet18", make_resnet(18, 1000, 224).unwrap()),
            ("resnet34", make_resnet(34, 1000, 224).unwrap()),
            ("densenet-bc-100-12", make_densenet_bc(100, 12, 0.5).unwrap()),
        ];
        for (name, want) in regenerated {
            let got = builtin_descriptor(name).unwrap();
            assert_eq!(got, want, "{name}");
        }
        assert!(builtin_descriptor("vgg16").is_err());
    }

    #[test]
    fn missing_arch_is_a_usage_error() {
        let code = run([
            "prunekit".to_string(),
            "train".into(),
            "--out".into(),
            "/tmp/prunekit-usage-error".into(),
            "--epochs".into(),
            "1".into(),
        ]);
        assert_ne!(code, 0);
    }

    #[test]
    fn unknown_builtin_fails_with_config_exit() {
        let code = run([
            "prunekit".to_string(),
            "count".into(),
            "--builtin".into(),
            "vgg16".into(),
        ]);
        assert_eq!(code, 2);
    }
}
