//! Command-line driver: simulate, fit, score and eval subcommands over
//! the library pipeline, with TOML configuration and checkpointing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{Error, Result};
use crate::eval::{classification_metrics, dispersion_report, read_scores, roc_auc, score_entities, write_scores};
use crate::infer::{fit, fit_state, seeded_stream, FitOptions};
use crate::model::{read_labels, Hyperparams, LabelSet};
use crate::synth::{generate, SynthConfig};
use crate::tensor::{ingest_tuples, ModeDecl, ModeKind};

/// Random stream reserved for synthetic generation.
pub const STREAM_SYNTH: u64 = u64::MAX;

/// TOML configuration: flat hyper-parameter keys plus mode declarations
/// and the simulation section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    #[serde(flatten)]
    pub hyper: Hyperparams,
    pub epoch_origin: i64,
    pub modes: Vec<ModeDecl>,
    pub simulate: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            hyper: Hyperparams::default(),
            epoch_origin: 0,
            modes: vec![
                ModeDecl::entity("reviewer"),
                ModeDecl::entity("product"),
                ModeDecl { name: "rating".into(), kind: ModeKind::Rating },
                ModeDecl { name: "week".into(), kind: ModeKind::Time },
            ],
            simulate: SynthConfig::default(),
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "densecore", version, about = "Dense-core detection via logistic tensor decomposition")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset with planted cores.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the model to a tuple file and optional labels.
    Fit {
        #[arg(long)]
        tuples: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Continue from an existing checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        optimizer: Option<String>,
        #[arg(long)]
        max_iters: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        neg_ratio: Option<f64>,
    },
    /// Score every entity of a mode with a trained task head.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate score files against ground truth; several score files
    /// yield a dispersion summary across runs.
    Eval {
        #[arg(long, action = clap::ArgAction::Append, required = true)]
        scores: Vec<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out_dir, seed } => cmd_simulate(config.as_deref(), &out_dir, seed),
        Command::Fit {
            tuples,
            labels,
            config,
            checkpoint,
            report,
            workers,
            resume,
            seed,
            rank,
            optimizer,
            max_iters,
            batch_size,
            neg_ratio,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.hyper.seed = s;
            }
            if let Some(r) = rank {
                cfg.hyper.rank = r;
            }
            if let Some(o) = optimizer {
                cfg.hyper.optimizer = o.parse()?;
            }
            if let Some(m) = max_iters {
                cfg.hyper.max_iters = m;
            }
            if let Some(b) = batch_size {
                cfg.hyper.batch_size = b;
            }
            if let Some(n) = neg_ratio {
                cfg.hyper.neg_ratio = n;
            }
            cmd_fit(
                &cfg,
                &tuples,
                labels.as_deref(),
                &checkpoint,
                report.as_deref(),
                workers.unwrap_or(1),
                resume.as_deref(),
            )
        }
        Command::Score { checkpoint, mode, task, out } => cmd_score(&checkpoint, &mode, &task, &out),
        Command::Eval { scores, truth, threshold } => cmd_eval(&scores, &truth, threshold),
    }
}

fn cmd_simulate(config: Option<&Path>, out_dir: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.hyper.seed);
    let mut rng = seeded_stream(seed, STREAM_SYNTH);
    let dataset = generate(&cfg.simulate, &mut rng)?;
    std::fs::create_dir_all(out_dir)?;
    dataset.write_tuples(&out_dir.join("tuples.csv"))?;
    dataset.write_labels(&out_dir.join("labels.csv"))?;
    dataset.write_truth(&out_dir.join("truth.csv"))?;
    println!(
        "wrote {} tuples, {} label sets to {}",
        dataset.tensor.len(),
        dataset.labels.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_fit(
    cfg: &Config,
    tuples: &Path,
    labels: Option<&Path>,
    checkpoint: &Path,
    report: Option<&Path>,
    workers: usize,
    resume: Option<&Path>,
) -> Result<()> {
    let file = std::fs::File::open(tuples)?;
    let (tensor, stats) = ingest_tuples(file, &cfg.modes, cfg.epoch_origin)?;
    let label_sets: Vec<LabelSet> = match labels {
        Some(p) => read_labels(std::fs::File::open(p)?, &tensor.scheme)?,
        None => Vec::new(),
    };
    let options = FitOptions { workers, ..Default::default() };

    let (state, fit_report, hyper) = match resume {
        Some(p) => {
            let loaded = load_checkpoint(p)?;
            let mut hyper = loaded.hyper;
            hyper.max_iters = cfg.hyper.max_iters;
            let mut state = loaded.state;
            let r = fit_state(&mut state, &tensor, &label_sets, &hyper, &options, hyper.max_iters)?;
            (state, r, hyper)
        }
        None => {
            let hyper = cfg.hyper.clone();
            let (state, r) = fit(&tensor, &label_sets, &hyper, &options)?;
            (state, r, hyper)
        }
    };

    let task_names: BTreeMap<usize, Vec<String>> =
        label_sets.iter().map(|s| (s.mode, s.task_names.clone())).collect();
    save_checkpoint(&state, &hyper, &tensor.scheme, &task_names, state.t, checkpoint)?;

    if let Some(p) = report {
        let mut f = std::fs::File::create(p)?;
        let effective = Config { hyper: hyper.clone(), ..cfg.clone() };
        let echo = serde_json::to_string(&effective)
            .map_err(|e| Error::Config(format!("config echo: {e}")))?;
        writeln!(f, "# config: {echo}")?;
        fit_report.write_to(&mut f, &[])?;
    }
    println!(
        "ingested {} tuples ({} duplicates), ran {} iterations, checkpoint at {}",
        tensor.len(),
        stats.duplicates,
        fit_report.iterations,
        checkpoint.display()
    );
    Ok(())
}

fn cmd_score(checkpoint: &Path, mode: &str, task: &str, out: &Path) -> Result<()> {
    let loaded = load_checkpoint(checkpoint)?;
    let mode_idx = loaded.scheme.mode_index(mode)?;
    let task_idx = loaded
        .task_names
        .get(&mode_idx)
        .and_then(|names| names.iter().position(|n| n == task))
        .ok_or_else(|| Error::NoHead { mode: mode.to_string(), task: task.to_string() })?;
    let scores = score_entities(&loaded.state, mode_idx, task_idx)?;
    let map = &loaded.scheme.entity_maps[mode_idx];
    let raw_ids: Vec<String> = (0..map.len()).map(|i| map.raw_of(i).to_string()).collect();
    let f = std::fs::File::create(out)?;
    write_scores(f, mode, task, &raw_ids, &scores)?;
    println!("wrote {} scores to {}", raw_ids.len(), out.display());
    Ok(())
}

/// `(mode, task)` -> entity -> positive flag, parsed from a truth or
/// label file.
type TruthMap = BTreeMap<(String, String), BTreeMap<String, bool>>;

fn read_truth(path: &Path) -> Result<TruthMap> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(std::fs::File::open(path)?);
    let mut truth: TruthMap = BTreeMap::new();
    for record in reader.records() {
        let r = record?;
        if r.len() < 4 {
            return Err(Error::Labels("truth file needs mode,entity,task,label columns".into()));
        }
        let positive = match r.get(3).unwrap().trim() {
            "+1" | "1" => true,
            "-1" | "0" => false,
            other => return Err(Error::Labels(format!("invalid truth label `{other}`"))),
        };
        truth
            .entry((r.get(0).unwrap().trim().to_string(), r.get(2).unwrap().trim().to_string()))
            .or_default()
            .insert(r.get(1).unwrap().trim().to_string(), positive);
    }
    Ok(truth)
}

#[derive(Debug, Serialize)]
struct EvalEntry {
    mode: String,
    task: String,
    auc: f64,
    #[serde(flatten)]
    metrics: crate::eval::Classification,
}

/// Per-run AUC for every `(mode, task)` pair shared by a score file and
/// the truth map.
fn eval_one(path: &Path, truth: &TruthMap, threshold: f64) -> Result<Vec<EvalEntry>> {
    let rows = read_scores(std::fs::File::open(path)?)?;
    let mut grouped: BTreeMap<(String, String), Vec<(String, f64)>> = BTreeMap::new();
    for row in rows {
        grouped.entry((row.mode, row.task)).or_default().push((row.entity, row.score));
    }
    let mut out = Vec::new();
    for ((mode, task), entries) in grouped {
        let Some(t) = truth.get(&(mode.clone(), task.clone())) else { continue };
        let mut scores = Vec::new();
        let mut flags = Vec::new();
        for (entity, score) in entries {
            if let Some(&positive) = t.get(&entity) {
                scores.push(score);
                flags.push(positive);
            }
        }
        if scores.is_empty() {
            continue;
        }
        let auc = roc_auc(&scores, &flags)?;
        let metrics = classification_metrics(&scores, &flags, threshold)?;
        out.push(EvalEntry { mode, task, auc, metrics });
    }
    if out.is_empty() {
        return Err(Error::Labels(format!(
            "{}: no (mode, task) pair overlaps the truth file",
            path.display()
        )));
    }
    Ok(out)
}

fn cmd_eval(scores: &[PathBuf], truth_path: &Path, threshold: f64) -> Result<()> {
    let truth = read_truth(truth_path)?;
    if scores.len() == 1 {
        let entries = eval_one(&scores[0], &truth, threshold)?;
        let text = serde_json::to_string_pretty(&entries)
            .map_err(|e| Error::Config(format!("metrics serialization: {e}")))?;
        println!("{text}");
        return Ok(());
    }
    // several runs: five-number dispersion of AUC per (mode, task)
    let mut per_pair: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for path in scores {
        for e in eval_one(path, &truth, threshold)? {
            per_pair.entry((e.mode, e.task)).or_default().push(e.auc);
        }
    }
    #[derive(Serialize)]
    struct DispersionEntry {
        mode: String,
        task: String,
        auc: crate::eval::Dispersion,
    }
    let mut out = Vec::new();
    for ((mode, task), aucs) in per_pair {
        out.push(DispersionEntry { mode, task, auc: dispersion_report(&aucs)? });
    }
    let text = serde_json::to_string_pretty(&out)
        .map_err(|e| Error::Config(format!("metrics serialization: {e}")))?;
    println!("{text}");
    Ok(())
}
