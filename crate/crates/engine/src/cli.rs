//! The `vdr` command line. Exit codes: 0 ok, 1 pipeline error, 2 config or usage error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vdr_core::codec::{decode_record, encode_record, DecodeError};
use vdr_core::sim::LatencyDist;
use vdr_core::{decode_trajectory, encode_trajectory, ImagePayload, ImageRef, Trajectory};

use crate::bench::{run_bench, BenchParams};
use crate::config::{EngineConfig, Services};
use crate::error::{ConfigError, PipelineError};
use crate::forge::{forge_pools, DatasetRecord, ForgeDeps, Split, VqaInstance};
use crate::rlprep::{build_groups, export_batch};
use crate::rollout::{tasks_for, RolloutMode, RolloutRunner};
use crate::synth::{sft_instances, synthesize_pool, write_audit, SynthDeps, SynthSettings};
use crate::tools::{Dispatch, ToolPool};

#[derive(Debug, Parser)]
#[command(name = "vdr", version, about = "Vision deep-research data and rollout engine")]
pub struct Cli {
    /// Engine config (TOML). Defaults to the built-in sim configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the VQA dataset (curated, fuzzy multi-hop and text-only).
    SynthVqa(SynthVqaArgs),
    /// Synthesize rejection-sampled SFT trajectories from a dataset.
    SynthTraj(SynthTrajArgs),
    /// Roll out the policy over a task dataset.
    Rollout(RolloutArgs),
    /// Reward, group and export trajectories as an RL batch.
    RlPrep(RlPrepArgs),
    /// Compare async and synchronous rollout throughput in the sim world.
    Bench(BenchArgs),
    /// Check a trajectory or RL batch file against the schema and invariants.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct SynthVqaArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Obfuscation rounds per fuzzy instance.
    #[arg(long, default_value_t = 2)]
    pub depth: u32,
    /// Relation hops per text-only question.
    #[arg(long, default_value_t = 2)]
    pub text_hops: u32,
    /// Directory of PNG/JPEG images (required for the live backend).
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// File of start URLs for text-only questions, one per line.
    #[arg(long)]
    pub start_urls: Option<PathBuf>,
    /// Discard log (JSONL).
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthTrajArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub audit: Option<PathBuf>,
    #[arg(long)]
    pub concurrency: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// direct, wis, wis_ts, cis or cis_ts.
    #[arg(long)]
    pub mode: Option<RolloutMode>,
    /// Per-trajectory metrics log (JSONL).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Rollouts per task; ids get a `#k` suffix when above 1.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Only use records of this split (sft or rl).
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
}

#[derive(Debug, Args)]
pub struct RlPrepArgs {
    #[arg(long)]
    pub trajectories: PathBuf,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Trajectories whose reward could not be judged (JSONL).
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    pub tasks: usize,
    #[arg(long, default_value_t = 64)]
    pub concurrency: usize,
    #[arg(long, default_value_t = 32)]
    pub pool: usize,
    #[arg(long, default_value_t = 200)]
    pub min_ms: u64,
    #[arg(long, default_value_t = 800)]
    pub max_ms: u64,
    /// Also write the report here (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub file: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "sft" => Ok(Split::Sft),
        "rl" => Ok(Split::Rl),
        _ => Err(format!("unknown split {s:?} (expected sft or rl)")),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Pipeline(_) => 1,
        }
    }
}

fn failed(msg: impl Into<String>) -> CliError {
    CliError::Pipeline(PipelineError::Failed(msg.into()))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| failed(format!("cannot read {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| failed(format!("cannot write {}: {e}", path.display())))
}

fn lines(bytes: &[u8]) -> impl Iterator<Item = (usize, &[u8])> {
    bytes
        .split(|b| *b == b'\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.iter().all(u8::is_ascii_whitespace))
}

fn jsonl<T: serde::Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        out.extend(encode_record(&item));
        out.push(b'\n');
    }
    out
}

/// Dataset records; bare instance lines are accepted with no split.
pub fn read_dataset(path: &Path) -> Result<Vec<(Option<Split>, VqaInstance)>, CliError> {
    let bytes = read(path)?;
    let mut out = Vec::new();
    for (n, line) in lines(&bytes) {
        let item = match decode_record::<DatasetRecord>(line) {
            Ok(r) => (Some(r.split), r.instance),
            Err(first) => match decode_record::<VqaInstance>(line) {
                Ok(i) => (None, i),
                Err(_) => return Err(failed(format!("{}:{n}: {first}", path.display()))),
            },
        };
        item.1.validate().map_err(|e| failed(format!("{}:{n}: {e}", path.display())))?;
        out.push(item);
    }
    Ok(out)
}

pub fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, CliError> {
    let bytes = read(path)?;
    vdr_core::codec::decode_lines(&bytes).map_err(|(n, e)| failed(format!("{}:{n}: {e}", path.display())))
}

fn load_images(dir: &Path) -> Result<Vec<ImageRef>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| failed(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let data = read(&p)?;
            let img = image::load_from_memory(&data).map_err(|e| failed(format!("{}: {e}", p.display())))?;
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            Ok(ImageRef { id, width: img.width(), height: img.height(), payload: ImagePayload::Encoded { data } })
        })
        .collect()
}

async fn synth_vqa(cfg: &EngineConfig, svc: &Services, args: &SynthVqaArgs) -> Result<(), CliError> {
    let images = match (&args.images, &svc.world) {
        (Some(dir), _) => load_images(dir)?,
        (None, Some(world)) => world.images.clone(),
        (None, None) => return Err(ConfigError::one("--images: required for the live backend").into()),
    };
    let start_urls: Vec<String> = match (&args.start_urls, &svc.world) {
        (Some(file), _) => String::from_utf8_lossy(&read(file)?)
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        (None, Some(world)) => world.pages.iter().map(|p| p.url.clone()).collect(),
        (None, None) => Vec::new(),
    };
    let deps = ForgeDeps {
        mllm: svc.mllm.clone(),
        selector: svc.selector.clone(),
        writer: svc.writer.clone(),
        backend: svc.backend.clone(),
        knowledge: svc.knowledge.clone(),
        prompts: svc.prompts.clone(),
        scales: cfg.vision.scales.clone(),
        seed: cfg.seed,
    };
    let report = forge_pools(&images, &start_urls, args.depth, args.text_hops, &deps, cfg.rollout.concurrency).await;
    let records = cfg.mix.allocate(&report.curated, &report.text_only, &report.fuzzy);
    write_file(&args.out, &jsonl(&records))?;
    if let Some(audit) = &args.audit {
        let rows = report.discarded.iter().map(|(id, stage, reason)| serde_json::json!({"id": id, "stage": stage, "reason": reason}));
        write_file(audit, &jsonl(rows))?;
    }
    let sft = records.iter().filter(|r| r.split == Split::Sft).count();
    eprintln!(
        "pools: {} curated, {} text-only, {} fuzzy, {} discarded; wrote {} records ({} sft, {} rl)",
        report.curated.len(),
        report.text_only.len(),
        report.fuzzy.len(),
        report.discarded.len(),
        records.len(),
        sft,
        records.len() - sft
    );
    Ok(())
}

async fn synth_traj(cfg: &EngineConfig, svc: &Services, args: &SynthTrajArgs) -> Result<(), CliError> {
    let records: Vec<DatasetRecord> = read_dataset(&args.dataset)?
        .into_iter()
        .map(|(split, instance)| DatasetRecord { split: split.unwrap_or(Split::Sft), instance })
        .collect();
    let instances = sft_instances(&records);
    let deps = SynthDeps {
        mllm: svc.mllm.clone(),
        judge: svc.judge.clone(),
        foundation: svc.foundation.clone(),
        verifier: svc.judge.clone(),
        backend: svc.backend.clone(),
        dispatch: Dispatch::Pool(ToolPool::new(
            cfg.rollout.tool_pool_size,
            std::time::Duration::from_millis(cfg.rollout.tool_timeout_ms),
        )),
        prompts: svc.prompts.clone(),
        counter: svc.counter.clone(),
    };
    let settings = SynthSettings {
        budgets: cfg.budgets,
        vision: cfg.vision.clone(),
        repetition: cfg.safeguards.repetition,
        error_limit: cfg.safeguards.error_limit,
        seed: cfg.seed,
    };
    let concurrency = args.concurrency.unwrap_or(cfg.rollout.concurrency);
    let report = synthesize_pool(&instances, &settings, &deps, concurrency).await;
    write_file(&args.out, &vdr_core::codec::encode_lines(&report.kept))?;
    if let Some(audit) = &args.audit {
        let bytes = write_audit(&report.discarded, Vec::new()).map_err(PipelineError::from)?;
        write_file(audit, &bytes)?;
    }
    eprintln!("kept {} of {} trajectories", report.kept.len(), instances.len());
    Ok(())
}

async fn rollout(cfg: &EngineConfig, svc: &Services, args: &RolloutArgs) -> Result<(), CliError> {
    let instances: Vec<VqaInstance> = read_dataset(&args.tasks)?
        .into_iter()
        .filter(|(split, _)| args.split.is_none() || *split == args.split)
        .map(|(_, i)| i)
        .collect();
    let mode = args.mode.unwrap_or(cfg.rollout.mode);
    let concurrency = args.concurrency.unwrap_or(cfg.rollout.concurrency);
    if concurrency == 0 || args.samples == 0 {
        return Err(ConfigError::one("--concurrency and --samples must be at least 1").into());
    }
    let runner = RolloutRunner {
        policy: svc.policy.clone(),
        backend: svc.backend.clone(),
        counter: svc.counter.clone(),
        prompts: svc.prompts.clone(),
        settings: cfg.rollout_settings(),
    };
    let tasks = tasks_for(&instances, args.samples, cfg.budgets, mode);
    let results = runner.run_batch(&tasks, concurrency, cfg.rollout.tool_pool_size).await?;
    let mut out = Vec::new();
    for r in &results {
        out.extend(encode_trajectory(&r.trajectory));
        out.push(b'\n');
    }
    write_file(&args.out, &out)?;
    if let Some(path) = &args.metrics {
        write_file(path, &jsonl(results.iter().map(|r| &r.metrics)))?;
    }
    let answered = results.iter().filter(|r| r.trajectory.final_answer().is_some()).count();
    eprintln!("{} trajectories ({} answered) in mode {}", results.len(), answered, mode.as_str());
    Ok(())
}

async fn rl_prep(cfg: &EngineConfig, svc: &Services, args: &RlPrepArgs) -> Result<(), CliError> {
    let trajectories = read_trajectories(&args.trajectories)?;
    let g = args.group_size.unwrap_or(cfg.rl.group_size);
    let report = build_groups(trajectories, g, svc.judge.as_ref(), &svc.prompts, &cfg.rl.mask, cfg.rl.format_penalty).await?;
    export_batch(&report.groups, &args.out)?;
    if let Some(path) = &args.audit {
        let rows = report.audit.iter().map(|(id, reason)| serde_json::json!({"id": id, "reason": reason}));
        write_file(path, &jsonl(rows))?;
    }
    let masked: usize = report.groups.iter().map(|g| g.masked.iter().filter(|m| **m).count()).sum();
    eprintln!("{} groups of {g}, {masked} masked, {} unjudged", report.groups.len(), report.audit.len());
    Ok(())
}

async fn bench(cfg: &EngineConfig, args: &BenchArgs) -> Result<(), CliError> {
    if args.min_ms > args.max_ms {
        return Err(ConfigError::one("--min-ms: must not exceed --max-ms").into());
    }
    if args.tasks == 0 || args.concurrency == 0 || args.pool == 0 {
        return Err(ConfigError::one("--tasks, --concurrency and --pool must be at least 1").into());
    }
    let params = BenchParams {
        tasks: args.tasks,
        concurrency: args.concurrency,
        tool_pool_size: args.pool,
        latency: LatencyDist::Uniform { min_ms: args.min_ms, max_ms: args.max_ms },
        world: cfg.world.clone(),
        seed: cfg.seed,
    };
    let report = run_bench(&params).await?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| failed(e.to_string()))?;
    if let Some(out) = &args.out {
        write_file(out, json.as_bytes())?;
    }
    println!("{json}");
    println!(
        "async {:.2}s vs sync {:.2}s: speedup {:.1}x",
        report.async_ms as f64 / 1000.0,
        report.sync_ms as f64 / 1000.0,
        report.speedup
    );
    Ok(())
}

/// Number of trajectories checked, or every problem found.
pub fn validate_file(bytes: &[u8]) -> Result<usize, Vec<String>> {
    let mut problems = Vec::new();
    let mut count = 0;
    for (n, line) in lines(bytes) {
        let value: serde_json::Value = match serde_json::from_slice(line) {
            Ok(v) => v,
            Err(e) => {
                problems.push(format!("line {n}: {e}"));
                continue;
            }
        };
        let result = match value.get("kind").and_then(|k| k.as_str()) {
            Some("header") => continue,
            Some("sample") => match value.get("trajectory") {
                Some(t) => match serde_json::from_value::<Trajectory>(t.clone()) {
                    Ok(t) => t.validate().map_err(DecodeError::Invariant),
                    Err(e) => Err(DecodeError::Malformed(e.to_string())),
                },
                None => {
                    problems.push(format!("line {n}: sample without trajectory"));
                    continue;
                }
            },
            _ => decode_trajectory(line).map(|_| ()),
        };
        match result {
            Ok(()) => count += 1,
            Err(e) => problems.push(format!("line {n}: {e}")),
        }
    }
    if problems.is_empty() {
        Ok(count)
    } else {
        Err(problems)
    }
}

const MAX_REPORTED: usize = 20;

fn validate(args: &ValidateArgs) -> Result<(), CliError> {
    let bytes = read(&args.file)?;
    match validate_file(&bytes) {
        Ok(n) => {
            println!("ok: {n} trajectories");
            Ok(())
        }
        Err(problems) => {
            for p in problems.iter().take(MAX_REPORTED) {
                eprintln!("{p}");
            }
            if problems.len() > MAX_REPORTED {
                eprintln!("... and {} more", problems.len() - MAX_REPORTED);
            }
            Err(failed(format!("{} invalid record(s)", problems.len())))
        }
    }
}

pub async fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => EngineConfig::load(path)?,
        None => EngineConfig::default(),
    };
    match &cli.command {
        Command::Validate(args) => validate(args),
        Command::Bench(args) => bench(&cfg, args).await,
        command => {
            let svc = cfg.services()?;
            match command {
                Command::SynthVqa(args) => synth_vqa(&cfg, &svc, args).await,
                Command::SynthTraj(args) => synth_traj(&cfg, &svc, args).await,
                Command::Rollout(args) => rollout(&cfg, &svc, args).await,
                Command::RlPrep(args) => rl_prep(&cfg, &svc, args).await,
                Command::Validate(_) | Command::Bench(_) => unreachable!(),
            }
        }
    }
}

/// Parses arguments, runs one command on a fresh runtime and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(execute(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
