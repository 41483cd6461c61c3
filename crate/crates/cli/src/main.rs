use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tr2::autograd::{checkpoint_bytes, load_checkpoint};
use tr2::guidance::GuidanceVariant;
use tr2::metrics::{stratified_eval, StratumRow, Strategy};
use tr2::model::Tr2Model;
use tr2::scenegraph::write_dataset;
use tr2::synth::generate;
use tr2::train::{
    ablate, evaluate, guidance_variants, gradcheck, merge_records, model_config, difference_variants, module_variants, toy_config,
    train, Dataset, RunConfig, RunRecord,
};

#[derive(Parser)]
#[command(name = "tr2", version, about = "Dynamic scene graph training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set fusion.heads=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    /// No guidance, binary change guidance, full guidance.
    Guidance,
    /// Direct versus temporal-difference guidance.
    Difference,
    /// Spatial encoder, temporal decoder and message token on and off.
    Modules,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset and crop embeddings.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train one model; writes the checkpoint, run record and test report.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value = "tr2")]
        label: String,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Also write change-degree strata here.
        #[arg(long)]
        strata: Option<PathBuf>,
        /// Checkpoint of a baseline trained with the same config file but
        /// the overrides in `--baseline-set`; adds gain columns to the strata.
        #[arg(long, requires = "strata")]
        baseline: Option<PathBuf>,
        #[arg(long = "baseline-set", value_name = "KEY=VALUE")]
        baseline_overrides: Vec<String>,
        /// Report destination; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train a family of variants over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        study: Study,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full objective on toy dimensions.
    Gradcheck {
        /// `none`, `eq2`, `eq4`, `binary`; all four when absent.
        #[arg(long)]
        guidance: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Merge run records into one CSV.
    Report {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = config.load()?;
            let ds = generate(&cfg.gen)?;
            write(&out.join("dataset.txt"), write_dataset(&ds.videos))?;
            write(&out.join("embeddings.txt"), ds.embeddings.to_text())?;
            println!("wrote {} videos to {}", ds.videos.len(), out.display());
        }
        Command::Train { config, out, label } => {
            let cfg = config.load()?;
            let dataset = Dataset::load(&cfg)?;
            let outcome = train(&cfg, &dataset, &label)?;
            write(&out.join("checkpoint.bin"), checkpoint_bytes(&outcome.store))?;
            write(&out.join("record.txt"), outcome.record.to_text())?;
            write(&out.join("config.txt"), cfg.to_text())?;
            if let Some(test) = &outcome.record.test {
                write(&out.join("test.csv"), test.to_csv())?;
            }
            println!("trained {label} in {:.1}s; outputs in {}", outcome.record.wall_seconds, out.display());
        }
        Command::Eval {
            config,
            checkpoint,
            split,
            strata,
            baseline,
            baseline_overrides,
            out,
        } => {
            let cfg = config.load()?;
            let dataset = Dataset::load(&cfg)?;
            let splits = dataset.splits(cfg.split, cfg.gen.seed)?;
            let videos = match split {
                SplitName::Train => &splits.train,
                SplitName::Val => &splits.val,
                SplitName::Test => &splits.test,
            };
            let eval_config = cfg.eval.for_task(cfg.task, &dataset.vocabulary);
            let load = |c: &RunConfig, path: &Path| -> Result<_> {
                let store = load_checkpoint(path)?;
                let model = Tr2Model::attach(&model_config(c, &dataset.vocabulary), &store)?;
                Ok(evaluate(&model, &store, videos, &dataset.embeddings, &eval_config)?)
            };
            let evaluation = load(&cfg, &checkpoint)?;
            emit(out.as_deref(), &evaluation.report.to_csv())?;
            if let Some(strata_path) = strata {
                let strategy = eval_config.strategies[0];
                let model_recalls = evaluation.video_recalls(strategy, 0);
                let base_recalls = match &baseline {
                    Some(path) => {
                        let mut bcfg = cfg.clone();
                        for kv in &baseline_overrides {
                            let (k, v) = kv
                                .split_once('=')
                                .with_context(|| format!("override {kv:?} is not KEY=VALUE"))?;
                            bcfg.set(k.trim(), v.trim())?;
                        }
                        Some(load(&bcfg, path)?.video_recalls(strategy, 0))
                    }
                    None => None,
                };
                write(&strata_path, StratumRow::to_csv(&stratified_eval(&model_recalls, base_recalls.as_deref())))?;
            }
        }
        Command::Ablate {
            config,
            study,
            seeds,
            out,
        } => {
            let cfg = config.load()?;
            let dataset = Dataset::load(&cfg)?;
            let variants = match study {
                Study::Guidance => guidance_variants(),
                Study::Difference => difference_variants(),
                Study::Modules => module_variants(),
            };
            let table = ablate(&cfg, &dataset, &variants, &seeds, Strategy::WithConstraints)?;
            let records: Vec<RunRecord> = table.rows.iter().flat_map(|r| r.records.iter().cloned()).collect();
            write(&out.join("table.csv"), table.to_csv())?;
            write(&out.join("runs.csv"), merge_records(&records))?;
            print!("{}", table.to_csv());
        }
        Command::Gradcheck {
            guidance,
            tolerance,
            step,
        } => {
            let variants = match guidance {
                Some(g) => vec![GuidanceVariant::parse(&g)?],
                None => vec![
                    GuidanceVariant::None,
                    GuidanceVariant::TemporalDifference,
                    GuidanceVariant::Direct,
                    GuidanceVariant::Binary,
                ],
            };
            let mut failed = Vec::new();
            for v in variants {
                let outcome = gradcheck(&toy_config(v), step, tolerance, None)?;
                println!(
                    "{} max_relative_error={:.3e} worst={} {}",
                    v.name(),
                    outcome.max_relative_error,
                    outcome.worst_parameter.as_deref().unwrap_or("-"),
                    if outcome.passed() { "pass" } else { "FAIL" }
                );
                if !outcome.passed() {
                    failed.push(format!(
                        "{} worst parameter {}",
                        v.name(),
                        outcome.worst_parameter.unwrap_or_default()
                    ));
                }
            }
            if !failed.is_empty() {
                bail!("gradcheck failed: {}", failed.join("; "));
            }
        }
        Command::Report { records, out } => {
            let parsed = records
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    Ok(RunRecord::parse(&text, &p.display().to_string())?)
                })
                .collect::<Result<Vec<_>>>()?;
            emit(out.as_deref(), &merge_records(&parsed))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
