use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use heatprompt::config::RunConfig;
use heatprompt::pipeline::{self, StageSummary};
use heatprompt::synthetic::{write_project, WorldParams};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Heat-demand regression pipeline over municipal isolines.
#[derive(Parser)]
#[command(name = "heatprompt", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "heatprompt.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the worker count.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Overrides the cache directory.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate isolines into isolines.jsonl and rejects.jsonl.
    Ingest,
    /// Fetch imagery and write images, masks, composites and composition.
    BuildDataset,
    /// Caption composites and embed the captions.
    CaptionEmbed,
    /// Cross-validate the configured models and feature variants.
    TrainEval,
    /// Render cv_report.json to report.md and report.json.
    Report,
    /// Run every stage in order.
    Run,
    /// Write a synthetic world and a config that runs offline.
    Synth {
        /// Directory for the world files and config.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        isolines: usize,
        #[arg(long, default_value_t = 7)]
        world_seed: u64,
    },
}

/// Exit status of a finished stage: 2 when its failure share is too high.
fn check(summary: StageSummary, threshold: f64) -> u8 {
    println!("{summary}");
    if summary.exceeds(threshold) {
        eprintln!(
            "{}: {:.1}% of samples failed (threshold {:.0}%)",
            summary.stage,
            summary.failure_rate() * 100.0,
            threshold * 100.0
        );
        2
    } else {
        0
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.parallelism {
        cfg.parallelism = p;
    }
    if let Some(dir) = &cli.cache_dir {
        cfg.paths.cache_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(out: &Path, isolines: usize, world_seed: u64) -> Result<()> {
    let params = WorldParams {
        isolines,
        seed: world_seed,
        ..Default::default()
    };
    let path = write_project(out, params).with_context(|| format!("writing world to {}", out.display()))?;
    println!("wrote {isolines} isolines and {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<u8> {
    if let Command::Synth { out, isolines, world_seed } = &cli.command {
        synth(out, *isolines, *world_seed)?;
        return Ok(0);
    }
    let cfg = load_config(cli)?;
    let threshold = cfg.failure_threshold;
    let build = |cfg: &RunConfig| -> Result<u8> {
        let client = pipeline::tile_client(cfg)?;
        Ok(check(pipeline::build_dataset(cfg, client.as_ref())?, threshold))
    };
    let caption = |cfg: &RunConfig| -> Result<u8> {
        let captioner = pipeline::caption_provider(cfg);
        let embedder = pipeline::embedding_provider(cfg);
        Ok(check(
            pipeline::caption_embed(cfg, captioner.as_ref(), embedder.as_ref())?,
            threshold,
        ))
    };
    let train = |cfg: &RunConfig| -> Result<u8> {
        let report = pipeline::train_eval(cfg)?;
        print!("{}", report.to_markdown());
        Ok(0)
    };
    let render = |cfg: &RunConfig| -> Result<u8> {
        let (md, _) = pipeline::report(cfg)?;
        print!("{md}");
        Ok(0)
    };
    let code = match cli.command {
        Command::Ingest => {
            let (n, rejects) = pipeline::ingest(&cfg)?;
            println!("ingest: {n} records, {} rejects", rejects.len());
            0
        }
        Command::BuildDataset => build(&cfg)?,
        Command::CaptionEmbed => caption(&cfg)?,
        Command::TrainEval => train(&cfg)?,
        Command::Report => render(&cfg)?,
        Command::Run => {
            pipeline::ingest(&cfg)?;
            let mut code = build(&cfg)?;
            code = code.max(caption(&cfg)?);
            train(&cfg)?;
            render(&cfg)?;
            code
        }
        Command::Synth { .. } => unreachable!("handled above"),
    };
    Ok(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
