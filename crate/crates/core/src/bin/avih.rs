use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avih::error::{Error, Result};
use avih::harness::config::{AblationCell, AblationGrid};
use avih::harness::{
    emit_report, run_pipeline_to, ExperimentManifest, Goal, RunConfig, StageStatus,
};

/// Environment variable giving the output directory when `--out` is absent.
const OUTPUT_ROOT_ENV: &str = "AVIH_OUTPUT_ROOT";

#[derive(Parser)]
#[command(
    name = "avih",
    version,
    about = "Gallery encryption, surrogate-key attack and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Render or ingest every dataset of the run.
    GenData,
    /// Train the target and evaluation service models.
    TrainService,
    /// Prepare the key, encrypt the gallery and check encryption efficacy.
    Encrypt,
    /// Train the surrogate key for every configured fraction and ablation cell.
    Attack,
    /// Baselines, per-run metrics and the report.
    Evaluate,
    /// Re-emit the report of an existing run directory.
    Report,
    /// All stages.
    Pipeline,
    /// Print the effective configuration as JSON.
    Config,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; the built-in desk profile when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Key-share fractions, comma separated or repeated.
    #[arg(long, global = true, value_delimiter = ',')]
    fraction: Vec<f64>,
    /// `off`, `grid`, or one cell such as `gan1_aug0`.
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Fraction used by the ablation grid.
    #[arg(long, global = true)]
    ablation_fraction: Option<f64>,
    #[arg(long = "seed.data", global = true)]
    seed_data: Option<u64>,
    #[arg(long = "seed.service", global = true)]
    seed_service: Option<u64>,
    #[arg(long = "seed.key", global = true)]
    seed_key: Option<u64>,
    #[arg(long = "seed.attack", global = true)]
    seed_attack: Option<u64>,
    #[arg(long = "seed.eval", global = true)]
    seed_eval: Option<u64>,
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Arbitrary `dotted.path=json` override, e.g. `attack.steps=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn parse_cell(tag: &str) -> Result<AblationCell> {
    AblationCell::grid()
        .into_iter()
        .find(|c| c.tag() == tag)
        .ok_or_else(|| {
            Error::contract(format!(
                "unknown ablation `{tag}`; use off, grid or gan{{0,1}}_aug{{0,1}}"
            ))
        })
}

fn effective_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("`--set {kv}` is not KEY=VALUE")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    for (name, v) in [
        ("data", c.seed_data),
        ("service", c.seed_service),
        ("key", c.seed_key),
        ("attack", c.seed_attack),
        ("eval", c.seed_eval),
    ] {
        if let Some(v) = v {
            overrides.push((format!("seeds.{name}"), v.to_string()));
        }
    }
    cfg = cfg.with_overrides(&overrides)?;
    if !c.fraction.is_empty() {
        let mut f = c.fraction.clone();
        f.sort_by(f64::total_cmp);
        f.dedup();
        cfg.fractions = f;
    }
    if let Some(a) = &c.ablation {
        let fraction = c
            .ablation_fraction
            .or(cfg.ablation.as_ref().map(|g| g.fraction))
            .unwrap_or(0.03);
        cfg.ablation = match a.as_str() {
            "off" => None,
            "grid" => Some(AblationGrid {
                fraction,
                cells: AblationCell::grid(),
            }),
            tag => Some(AblationGrid {
                fraction,
                cells: vec![parse_cell(tag)?],
            }),
        };
    } else if let (Some(f), Some(g)) = (c.ablation_fraction, cfg.ablation.as_mut()) {
        g.fraction = f;
    }
    if let Some(n) = c.replicates {
        cfg.replicates = n;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    } else if let Some(env) = std::env::var_os(OUTPUT_ROOT_ENV) {
        cfg.output_dir = PathBuf::from(env);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(m: &ExperimentManifest) -> serde_json::Value {
    let count = |s: StageStatus| m.stages.iter().filter(|r| r.status == s).count();
    serde_json::json!({
        "output_dir": m.config.output_dir,
        "stages": m.stages.len(),
        "cache_hits": m.stages.iter().filter(|r| r.cache_hit).count(),
        "recomputed": m.recomputed,
        "failed": count(StageStatus::Failed),
        "skipped": count(StageStatus::Skipped),
        "complete": m.complete,
    })
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.common)?;
    let goal = match cli.command {
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            return Ok(());
        }
        Command::Report => {
            for p in emit_report(&cfg.output_dir)? {
                println!("{}", p.display());
            }
            return Ok(());
        }
        Command::GenData => Goal::Data,
        Command::TrainService => Goal::Service,
        Command::Encrypt => Goal::Encrypt,
        Command::Attack => Goal::Attack,
        Command::Evaluate | Command::Pipeline => Goal::Evaluate,
    };
    let manifest = run_pipeline_to(&cfg, goal)?;
    println!("{}", serde_json::to_string_pretty(&summarize(&manifest))?);
    let failed: Vec<String> = manifest
        .stages
        .iter()
        .filter(|s| s.status == StageStatus::Failed)
        .map(|s| format!("{}: {}", s.name, s.error.clone().unwrap_or_default()))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Stage {
            stage: "pipeline".into(),
            message: failed.join("; "),
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let json = serde_json::to_string(&e.report())
                .unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", e.kind()));
            eprintln!("{json}");
            ExitCode::FAILURE
        }
    }
}
