use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use notecode::config::RunConfig;
use notecode::data;
use notecode::error::{Error, Result};
use notecode::finetune;
use notecode::metrics::ThresholdMode;
use notecode::pipeline::{self, Context, Stage};

/// Directory searched for `config.toml` when `--config` is not given.
const CONFIG_DIR_ENV: &str = "NOTECODE_CONFIG_DIR";

#[derive(Parser, Debug)]
#[command(name = "notecode", version = env!("NOTECODE_VERSION"), about = "Contrastive note and code encoders for automated coding")]
struct Cli {
    /// TOML run configuration. Defaults to $NOTECODE_CONFIG_DIR/config.toml
    /// when present, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun stages even when their outputs are current.
    #[arg(long, global = true)]
    force: bool,
    /// Root directory for stage outputs.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Config override such as `contrastive.train.steps=200`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or ingest the cohort, split patients and build vocabularies.
    GenData,
    /// Masked-code pre-training of the code encoder.
    PretrainCodes,
    /// Masked-token pre-training of the text encoder.
    PretrainText,
    /// Joint contrastive training of both encoders.
    TrainContrastive,
    /// Extend text positions and continue contrastive training.
    Lengthen,
    /// Contrastive fine-tuning on code descriptions.
    FinetuneIcdDesc,
    /// Prompt fine-tuning on the rare-label task.
    FinetunePrompt,
    /// Re-rank candidate codes with the prompt model.
    Rerank,
    /// Score predictions; standalone when `--pred` and `--gold` are given.
    Evaluate(EvaluateArgs),
    /// Procrustes alignment of description and code embeddings.
    AlignReport,
    /// Write code and description embeddings as CSV.
    ExportEmbeddings,
    /// Run every stage in order.
    RunAll,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Args, Debug, Default)]
struct EvaluateArgs {
    /// Predictions as JSON Lines.
    #[arg(long, requires = "gold")]
    pred: Option<PathBuf>,
    /// Notes file holding the gold codes.
    #[arg(long, requires = "pred")]
    gold: Option<PathBuf>,
    /// Dev predictions used to choose thresholds.
    #[arg(long, requires_all = ["pred", "dev_gold"])]
    dev_pred: Option<PathBuf>,
    #[arg(long, requires = "dev_pred")]
    dev_gold: Option<PathBuf>,
    #[arg(long, value_enum)]
    threshold_mode: Option<Mode>,
    /// Report destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Global,
    PerLabel,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        3
    } else if e.is_numeric() {
        4
    } else {
        1
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let ctx = Context {
        out_dir: cli.out_dir.clone(),
        force: cli.force,
        version: env!("NOTECODE_VERSION").to_string(),
    };
    let stage = match &cli.command {
        Command::GenData => Stage::GenData,
        Command::PretrainCodes => Stage::PretrainCodes,
        Command::PretrainText => Stage::PretrainText,
        Command::TrainContrastive => Stage::TrainContrastive,
        Command::Lengthen => Stage::Lengthen,
        Command::FinetuneIcdDesc => Stage::FinetuneIcdDesc,
        Command::FinetunePrompt => Stage::FinetunePrompt,
        Command::Rerank => Stage::Rerank,
        Command::Evaluate(args) if args.pred.is_some() => return evaluate_files(args, &cfg),
        Command::Evaluate(_) => Stage::Evaluate,
        Command::AlignReport => Stage::AlignReport,
        Command::ExportEmbeddings => Stage::ExportEmbeddings,
        Command::RunAll => {
            for outcome in pipeline::run_all(&cfg, &ctx)? {
                report(&outcome);
            }
            return Ok(());
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            return Ok(());
        }
    };
    report(&pipeline::run_stage(&cfg, &ctx, stage)?);
    Ok(())
}

fn report(outcome: &pipeline::StageOutcome) {
    let state = if outcome.skipped { "up to date" } else { "done" };
    println!("{}: {state} ({})", outcome.stage.name(), outcome.dir.display());
    println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli.config.clone().or_else(|| {
        let p = Path::new(&std::env::var_os(CONFIG_DIR_ENV)?).join("config.toml");
        p.exists().then_some(p)
    });
    let mut cfg = match &path {
        Some(p) => {
            log::info!("loading config {}", p.display());
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if !cli.overrides.is_empty() {
        cfg = apply_overrides(&cfg, &cli.overrides)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `a.b.c=value` assignments. Values parse as TOML literals and
/// fall back to plain strings.
fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut root: toml::Table = cfg.to_toml()?.parse().map_err(|e| Error::Config(format!("{e}")))?;
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut table = &mut root;
        for part in path {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a section")))?;
        }
        table.insert(last.to_string(), value);
    }
    RunConfig::from_toml(&toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?)
}

fn evaluate_files(args: &EvaluateArgs, cfg: &RunConfig) -> Result<()> {
    let (pred, gold) = (args.pred.as_ref().expect("checked"), args.gold.as_ref().expect("required by clap"));
    let preds = finetune::load_predictions(pred)?;
    let notes = data::load_notes(gold)?;
    let dev = match (&args.dev_pred, &args.dev_gold) {
        (Some(p), Some(g)) => Some((finetune::load_predictions(p)?, data::load_notes(g)?)),
        _ => None,
    };
    let mode = match args.threshold_mode {
        Some(Mode::Global) => ThresholdMode::Global,
        Some(Mode::PerLabel) => ThresholdMode::PerLabel,
        None => cfg.eval.threshold_mode,
    };
    let report = pipeline::evaluate_predictions(&preds, &notes, dev.as_ref().map(|(p, g)| (p.as_slice(), g.as_slice())), mode)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(out) => {
            std::fs::write(out, &json)?;
            print!("{}", report.table(&pred.display().to_string()));
        }
        None => print!("{json}"),
    }
    Ok(())
}
