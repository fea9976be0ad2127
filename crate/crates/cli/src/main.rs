use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vlmprobe::inspect::{agreement, apply_overrides, audit_csv, load_human_overrides, sample_for_audit, AgreementCheck};
use vlmprobe::orchestrate::{build_report, init_toy, ExperimentConfig, Pipeline, Stage, Store};

#[derive(Parser)]
#[command(name = "vlmprobe", version, about = "Align a language model to a VLM's similarity reward and inspect what it says")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Seed for alignment, sampling and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use synthetic backends and the offline stub judge only.
    #[arg(long, global = true)]
    offline: bool,
    /// Comma-separated stages for `run` (align,generate,judge,evaluate,report).
    #[arg(long, global = true)]
    stages: Option<String>,
    /// Override a config value by its dotted path, e.g. `--set kl.target_kl=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    Informative,
    Visual,
}

#[derive(Subcommand)]
enum Command {
    /// Check that the dataset, backends and prompt sets resolve; register the experiment.
    Validate,
    /// RL-align the policy to the reward backend.
    Align,
    /// Answer every question for every class (temperature 0).
    Generate,
    /// Judge descriptions as informative/spurious and visual/non-visual.
    Judge,
    /// Zero-shot evaluation of all subsets and baselines.
    Evaluate,
    /// Run several stages (all by default, or --stages).
    Run,
    /// Cross-backend accuracy matrix over experiments in the store.
    CrossEval {
        /// Experiment ids (default: the configured one).
        ids: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Judge–human agreement, or write an audit sheet with --sample.
    Agreement {
        ids: Vec<String>,
        #[arg(long, value_enum, default_value = "informative")]
        check: CheckArg,
        /// Human labels CSV (description_id, informative, visual, attributes).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Write a seeded audit sample of this many descriptions per experiment instead.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, default_value = "audit.csv")]
        audit_out: PathBuf,
    },
    /// Build report tables for evaluated experiments.
    Report {
        ids: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the toy dataset and an experiment.toml into DIR.
    InitToy { dir: PathBuf },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&cli.config, &cli.overrides)
        .with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.ppo.seed = seed;
    }
    if cli.offline {
        cfg.offline = true;
        cfg.judge.stub = true;
    }
    Ok(cfg)
}

fn ids_or_default(ids: &[String], cfg: &ExperimentConfig) -> Vec<String> {
    if ids.is_empty() {
        vec![cfg.experiment_id.clone()]
    } else {
        ids.to_vec()
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run_stages(cli: &Cli, stages: &[Stage]) -> Result<()> {
    let pipeline = Pipeline::new(load_config(cli)?)?;
    let record = pipeline.run(stages)?;
    println!("{}: {:?}", record.config.experiment_id, record.status);
    if let Some(b) = &record.breakdown {
        print_json(b)?;
    }
    Ok(())
}

fn write_bundle_files(dir: &Path, files: impl Iterator<Item = (String, String)>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in files {
        std::fs::write(dir.join(&name), body)?;
        println!("wrote {}", dir.join(name).display());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match &cli.command {
        Command::InitToy { dir } => {
            let path = init_toy(dir, cli.seed.unwrap_or(0))?;
            println!("wrote {}", path.display());
        }
        Command::Validate => {
            let pipeline = Pipeline::new(load_config(&cli)?)?;
            print_json(&pipeline.validate()?)?;
        }
        Command::Align => run_stages(&cli, &[Stage::Align])?,
        Command::Generate => run_stages(&cli, &[Stage::Generate])?,
        Command::Judge => run_stages(&cli, &[Stage::Judge])?,
        Command::Evaluate => run_stages(&cli, &[Stage::Evaluate])?,
        Command::Run => {
            let stages = match &cli.stages {
                Some(s) => Stage::parse_list(s)?,
                None => Stage::ALL.to_vec(),
            };
            if stages.is_empty() {
                bail!("--stages selected nothing");
            }
            run_stages(&cli, &stages)?;
        }
        Command::Report { ids, out } => {
            let cfg = load_config(&cli)?;
            let store = Store::open(&cfg.output_dir)?;
            let ids = ids_or_default(ids, &cfg);
            let bundle = build_report(&store, &ids)?;
            let dir = out.clone().unwrap_or_else(|| cfg.output_dir.join("report"));
            write_bundle_files(&dir, bundle.files.into_iter())?;
            for id in &ids {
                store.advance(id, vlmprobe::orchestrate::Status::Reported)?;
            }
        }
        Command::CrossEval { ids, out } => {
            let cfg = load_config(&cli)?;
            let store = Store::open(&cfg.output_dir)?;
            let bundle = build_report(&store, &ids_or_default(ids, &cfg))?;
            let dir = out.clone().unwrap_or_else(|| cfg.output_dir.join("cross_eval"));
            write_bundle_files(&dir, bundle.files.into_iter().filter(|(n, _)| n.starts_with("cross_vlm")))?;
        }
        Command::Agreement { ids, check, labels, sample, audit_out } => {
            let cfg = load_config(&cli)?;
            let store = Store::open(&cfg.output_dir)?;
            let ids = ids_or_default(ids, &cfg);
            let mut strata = Vec::new();
            for id in &ids {
                strata.push((id.clone(), store.load_descriptions(id)?));
            }
            if let Some(n) = sample {
                let (picked, warnings) = sample_for_audit(&strata, *n, cfg.seed);
                for w in warnings {
                    log::warn!("{w}");
                }
                std::fs::write(audit_out, audit_csv(&picked)?)?;
                println!("wrote {} descriptions to {}", picked.len(), audit_out.display());
                return Ok(());
            }
            let mut records: Vec<_> = strata.into_iter().flat_map(|(_, r)| r).collect();
            if let Some(p) = labels {
                apply_overrides(&mut records, &load_human_overrides(p)?);
            }
            let check = match check {
                CheckArg::Informative => AgreementCheck::Informative,
                CheckArg::Visual => AgreementCheck::Visual,
            };
            let labeled: Vec<_> = records
                .into_iter()
                .filter(|r| {
                    r.human_label.as_ref().is_some_and(|h| match check {
                        AgreementCheck::Informative => h.informative.is_some(),
                        AgreementCheck::Visual => h.visual.is_some(),
                    })
                })
                .collect();
            let pct = agreement(&labeled, check)?;
            println!("{check:?} agreement: {pct:.1}% over {} descriptions", labeled.len());
        }
    }
    Ok(())
}
