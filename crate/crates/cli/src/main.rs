//! `motionfuse` command line: generate scenes, train, predict, evaluate,
//! aggregate and benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use motionfuse::config::RunConfig;
use motionfuse::decoder::PredictionRecord;
use motionfuse::model::{Checkpoint, Model};
use motionfuse::pipeline::{self, RunManifest, Split, BENCH_HEADER};
use motionfuse::scene::{read_scenes, write_scenes};
use motionfuse::{jsonl, Error};

#[derive(Parser)]
#[command(name = "motionfuse", version, about = "Multimodal motion forecasting on synthetic driving scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> motionfuse::Result<RunConfig> {
        let cfg = RunConfig::load(&self.config)?;
        let cfg = match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene file.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint and `<out>.loss.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the ensemble-merged mixture of every modeled agent.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against the scenes' ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: PathBuf,
        /// Prediction file to score.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Predict with this checkpoint instead of reading a prediction file.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV report; the text report always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reduce every prediction to `aggregate.k_out` trajectories.
    Aggregate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep fusion x regime x latent ratio and write one CSV row per configuration.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } => 3,
        Error::Numeric(_) | Error::Diverged { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn manifest_name(out: &Path) -> String {
    RunManifest::path_for(out)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> motionfuse::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_predictions(path: &Path, mut records: Vec<PredictionRecord>) -> motionfuse::Result<()> {
    let name = manifest_name(path);
    for r in &mut records {
        r.manifest = Some(name.clone());
    }
    jsonl::write(path, &records)
}

fn run(command: Command) -> motionfuse::Result<()> {
    match command {
        Command::Generate { common, split, out } => {
            let cfg = common.load()?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let mut m = RunManifest::new("generate", &cfg);
            let scenes = m.time("generate", || pipeline::generate_split(&cfg, split))?;
            m.time("write", || write_scenes(&out, &scenes))?;
            m.outputs.push(display(&out));
            m.save(&RunManifest::path_for(&out))?;
            eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::Train { common, scenes, out } => {
            let cfg = common.load()?;
            let mut m = RunManifest::new("train", &cfg);
            m.inputs.push(display(&scenes));
            let data = m.time("read", || read_scenes(&scenes))?;
            let (model, report) = m.time("train", || {
                pipeline::train_model_with(&cfg, &data, &mut |p| {
                    eprintln!(
                        "step {:>6}  lr {:.3e}  loss {:.5}  cls {:.5}  reg {:.5}",
                        p.step, p.lr, p.total, p.classification, p.regression
                    )
                })
            })?;
            model.checkpoint().save(&out)?;
            let mut curve = String::from("step,lr,total,classification,regression\n");
            for p in &report.curve {
                curve.push_str(&format!("{},{},{},{},{}\n", p.step, p.lr, p.total, p.classification, p.regression));
            }
            let curve_path = PathBuf::from(format!("{}.loss.csv", out.display()));
            write_text(&curve_path, &curve)?;
            m.outputs.extend([display(&out), display(&curve_path)]);
            m.save(&RunManifest::path_for(&out))?;
        }
        Command::Predict { checkpoint, scenes, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let model = Model::from_checkpoint(&ck)?;
            let data = read_scenes(&scenes)?;
            let mut m = RunManifest::with_hash("predict", &ck.config_hash, 0);
            m.inputs.extend([display(&checkpoint), display(&scenes)]);
            m.outputs.push(display(&out));
            let records = m.time("predict", || pipeline::predict(&model, &data))?;
            write_predictions(&out, records)?;
            m.save(&RunManifest::path_for(&out))?;
        }
        Command::Eval {
            common,
            scenes,
            predictions,
            checkpoint,
            out,
        } => {
            let cfg = common.load()?;
            let mut m = RunManifest::new("eval", &cfg);
            m.inputs.push(display(&scenes));
            let data = read_scenes(&scenes)?;
            let records = match (predictions, checkpoint) {
                (Some(p), _) => {
                    m.inputs.push(display(&p));
                    jsonl::read(&p)?
                }
                (None, Some(c)) => {
                    m.inputs.push(display(&c));
                    let model = Model::from_checkpoint(&Checkpoint::load(&c)?)?;
                    m.time("predict", || pipeline::predict(&model, &data))?
                }
                (None, None) => unreachable!("clap requires one of the two"),
            };
            let report = m.time("evaluate", || pipeline::evaluate_predictions(&records, &data, &cfg.metrics))?;
            print!("{}", report.to_text());
            if let Some(out) = out {
                write_text(&out, &report.to_csv())?;
                m.outputs.push(display(&out));
                m.save(&RunManifest::path_for(&out))?;
            }
        }
        Command::Aggregate {
            common,
            predictions,
            out,
        } => {
            let cfg = common.load()?;
            let mut m = RunManifest::new("aggregate", &cfg);
            m.inputs.push(display(&predictions));
            let records: Vec<PredictionRecord> = jsonl::read(&predictions)?;
            let reduced = m.time("aggregate", || pipeline::aggregate_predictions(&records, &cfg.aggregate))?;
            write_predictions(&out, reduced)?;
            m.outputs.push(display(&out));
            m.save(&RunManifest::path_for(&out))?;
        }
        Command::Bench { common, out } => {
            let cfg = common.load()?;
            let mut m = RunManifest::new("bench", &cfg);
            let train = pipeline::generate_split(&cfg, Split::Train)?;
            let eval = pipeline::generate_split(&cfg, Split::Eval)?;
            let rows = m.time("bench", || pipeline::bench(&cfg, &train, &eval))?;
            let mut csv = format!("{BENCH_HEADER}\n");
            for r in &rows {
                csv.push_str(&r.csv());
                csv.push('\n');
            }
            write_text(&out, &csv)?;
            m.outputs.push(display(&out));
            m.save(&RunManifest::path_for(&out))?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
        }
    }
    Ok(())
}
