//! Command-line front end.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_k_list, AppConfig, Overrides};
use crate::data::{generate_synthetic, DatasetContainer};
use crate::error::{Error, Result};
use crate::eval::{group_by_complex, MetricsReport, RankedModel};
use crate::explain::{encode_pgm, explain_sample, export_overlay};
use crate::model::{split_groups, InterfacePairSample, PumbaModel, GROUP_NAMES};
use crate::tensor::Tensor;
use crate::train::{log_csv, Trainer};

#[derive(Debug, Parser)]
#[command(name = "pumba", version, about = "Score protein docking interfaces with bidirectional state-space encoders")]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and batching.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Comma-separated top-k cut-offs for success rates.
    #[arg(long, global = true, value_name = "LIST", value_parser = parse_k_list_arg)]
    pub k_list: Option<KList>,
    /// Score threshold for the thresholded metrics.
    #[arg(long, global = true, value_name = "T")]
    pub threshold: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic planted-signal dataset container.
    GenSynthetic(GenArgs),
    /// Train a model on a container and write a checkpoint.
    Train(TrainArgs),
    /// Score every sample of a container (CSV: complex_id,model_id,score).
    Score(ScoreArgs),
    /// Compute the evaluation report from a score CSV and its container.
    Eval(EvalArgs),
    /// Write attention overlays and relevance tables for one sample.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Planted signal strength in [0, 1].
    #[arg(long)]
    pub signal: Option<f64>,
    #[arg(long)]
    pub complexes: Option<usize>,
    /// Decoys per complex.
    #[arg(long)]
    pub decoys: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset container directory.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many optimizer steps in this invocation.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from a checkpoint instead of a fresh model.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV written by `score`.
    #[arg(long, value_name = "PATH")]
    pub scores: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long)]
    pub complex: String,
    #[arg(long)]
    pub model: String,
}

/// Parsed `--k-list` value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KList(pub Vec<usize>);

fn parse_k_list_arg(s: &str) -> std::result::Result<KList, String> {
    parse_k_list(s).map(KList)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "training_log.csv";
pub const SCORES_FILE: &str = "scores.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    complex_id: String,
    model_id: String,
    score: f32,
}

/// Parses `args` (including the program name), runs the command and maps
/// the outcome to an exit code.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_dir(cli_out: &Option<PathBuf>) -> Result<&Path> {
    let dir = cli_out
        .as_deref()
        .ok_or_else(|| Error::Config("--out DIR is required".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        k_list: cli.k_list.clone().map(|k| k.0),
        threshold: cli.threshold,
    };
    let mut cfg = AppConfig::resolve(cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::GenSynthetic(a) => {
            let spec = &mut cfg.synthetic;
            if let Some(s) = a.signal {
                spec.signal = s;
            }
            if let Some(c) = a.complexes {
                spec.complexes = c;
            }
            if let Some(d) = a.decoys {
                spec.decoys = d;
            }
            let dir = out_dir(&cli.out)?;
            let c = generate_synthetic(spec, dir)?;
            println!("wrote {} samples to {}", c.len(), dir.display());
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            let dir = out_dir(&cli.out)?;
            let samples = load_nonempty(&a.data)?;
            let mut trainer = match &a.resume {
                Some(p) => load_checkpoint(p)?,
                None => {
                    let model = PumbaModel::new(cfg.model.clone(), cfg.train.seed)?;
                    Trainer::new(model, cfg.train.clone())?
                }
            };
            let limit = a.max_steps.unwrap_or(u64::MAX);
            let mut taken = 0u64;
            let rows = trainer.fit(&samples, |_| {
                taken += 1;
                taken < limit
            })?;
            write(&dir.join(TRAIN_LOG_FILE), log_csv(&rows))?;
            save_checkpoint(&trainer, &dir.join(CHECKPOINT_FILE))?;
            if let Some(last) = rows.last() {
                println!(
                    "{} steps, last loss {:.4} (bce {:.4})",
                    rows.len(),
                    last.loss.total,
                    last.loss.bce
                );
            }
        }
        Command::Score(a) => {
            let dir = out_dir(&cli.out)?;
            let model = load_checkpoint(&a.checkpoint)?.model;
            let samples = load_nonempty(&a.data)?;
            let scores = score_all(&model, &samples)?;
            let mut w = csv::Writer::from_path(dir.join(SCORES_FILE))
                .map_err(|e| csv_error(&dir.join(SCORES_FILE), e))?;
            for (s, score) in samples.iter().zip(scores) {
                w.serialize(ScoreRow {
                    complex_id: s.complex_id.clone(),
                    model_id: s.model_id.clone(),
                    score,
                })
                .map_err(|e| csv_error(&dir.join(SCORES_FILE), e))?;
            }
            w.flush().map_err(|e| Error::io(dir.join(SCORES_FILE), e))?;
        }
        Command::Eval(a) => {
            let container = DatasetContainer::open(&a.data)?;
            let mut scores: HashMap<(String, String), f64> = HashMap::new();
            let mut r = csv::Reader::from_path(&a.scores).map_err(|e| csv_error(&a.scores, e))?;
            for row in r.deserialize::<ScoreRow>() {
                let row = row.map_err(|e| csv_error(&a.scores, e))?;
                scores.insert((row.complex_id, row.model_id), f64::from(row.score));
            }
            let rows = container
                .records()
                .iter()
                .map(|rec| {
                    let key = (rec.complex_id.clone(), rec.model_id.clone());
                    let score = *scores.get(&key).ok_or_else(|| {
                        Error::Manifest(format!("no score for ({}, {})", key.0, key.1))
                    })?;
                    Ok((
                        key.0,
                        RankedModel {
                            model_id: key.1,
                            score,
                            native: rec.label == 1,
                            capri: rec.capri,
                        },
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let report = MetricsReport::compute(
                &group_by_complex(rows),
                &cfg.eval.success_ks,
                &cfg.eval.capri_ks,
                cfg.eval.threshold,
            )?;
            print!("{}", report.to_text());
            if cli.out.is_some() {
                let dir = out_dir(&cli.out)?;
                for (stem, csv) in report.to_csv_tables() {
                    write(&dir.join(format!("{stem}.csv")), csv)?;
                }
                write(&dir.join("report.txt"), report.to_text())?;
            }
        }
        Command::Explain(a) => {
            let dir = out_dir(&cli.out)?;
            let model = load_checkpoint(&a.checkpoint)?.model;
            let container = DatasetContainer::open(&a.data)?;
            let record = container
                .records()
                .iter()
                .find(|r| r.complex_id == a.complex && r.model_id == a.model)
                .ok_or_else(|| {
                    Error::Manifest(format!("sample ({}, {}) not in container", a.complex, a.model))
                })?;
            let sample = container.read_sample(record)?;
            let ex = explain_sample(&model, &sample, cfg.explain.cutoff)?;
            let inputs = split_groups(&sample, &model.config.groups)?;
            for (map, input) in ex.maps.iter().zip(&inputs) {
                let a = map.grid.image_size;
                let plane = Tensor::new([a, a], input.image.data()[..a * a].to_vec())?;
                export_overlay(map, &plane, &dir.join(format!("{}_overlay.ppm", map.group)))?;
                write(&dir.join(format!("{}_channel.pgm", map.group)), encode_pgm(&plane)?)?;
                write(&dir.join(format!("{}_relevance.csv", map.group)), map.to_csv())?;
            }
            let mut csv = String::from("group,raw,z\n");
            for (g, name) in GROUP_NAMES.iter().enumerate() {
                csv.push_str(&format!("{name},{},{}\n", ex.importance.raw[g], ex.importance.z[g]));
            }
            write(&dir.join("feature_importance.csv"), csv)?;
            println!(
                "score {:.4}; most important group: {}",
                ex.score,
                GROUP_NAMES[ex.importance.top()]
            );
        }
    }
    Ok(())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Manifest(format!("{}: {e}", path.display()))
}

fn load_nonempty(dir: &Path) -> Result<Vec<InterfacePairSample>> {
    let container = DatasetContainer::open(dir)?;
    if container.is_empty() {
        return Err(Error::Manifest(format!("{} holds no samples", dir.display())));
    }
    container.load_all()
}

/// Worker count from `PUMBA_THREADS`, defaulting to the available cores.
pub fn worker_count() -> usize {
    std::env::var("PUMBA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Scores in input order; parallel across samples.
pub fn score_all(model: &PumbaModel, samples: &[InterfacePairSample]) -> Result<Vec<f32>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| model.score(s).map(|b| b.score))
            .collect()
    })
}
