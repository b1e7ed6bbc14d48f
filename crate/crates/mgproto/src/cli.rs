//! Command-line experiment runner.
//!
//! Subcommands: `train`, `eval`, `ood`, `prune`, `gen-data`, `gradcheck`.
//! Every subcommand is a pure function of its inputs and the seed: running
//! one twice produces byte-identical artifacts.
//!
//! Exit codes are a stable scripting contract: `0` success, `1` runtime
//! failure, `2` usage error (bad flags, bad config, unreadable or malformed
//! input files).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::density::{classify_or_abstain, Decision, ModelHead};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, auroc, fpr95, fpr95_threshold, ScoreSet};
use crate::net::TinyNet;
use crate::report::{emit_report, svg_priors, write_priors_csv, MetricRow};
use crate::rng::SeedStream;
use crate::synth::{generate_dataset, load_dataset, save_dataset, Dataset, Split};
use crate::train::{
    default_abstain_threshold, ground_prototypes, predict, prune_head, scores, train_on,
    StepMetrics,
};

/// Top-level argument parser.
#[derive(Debug, Parser)]
#[command(
    name = "mgproto",
    version,
    about = "Gaussian-mixture prototype experiments on synthetic data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the config-driven subcommands.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment configuration file (flat JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's root seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// All subcommands.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoint, metrics, grounding record, and
    /// report files into the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for artifacts.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Worker-thread cap; 1 and N produce identical outputs.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        /// Checkpoint to evaluate (must contain the feature extractor).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset to evaluate on (`.bin` or `.json` path).
        #[arg(long)]
        dataset: PathBuf,
        /// Optional report directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Marginal-density abstention threshold; when set, the abstention
        /// rate at this threshold is reported alongside accuracy.
        #[arg(long)]
        abstain_threshold: Option<f64>,
    },
    /// Score an ID and an OoD dataset and report FPR95 / AUROC.
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        /// In-distribution dataset.
        #[arg(long)]
        id_data: PathBuf,
        /// Out-of-distribution dataset.
        #[arg(long)]
        ood_data: PathBuf,
        /// Optional report directory (histogram CSV and SVG).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Keep only each class's highest-prior prototypes.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of prototypes to keep per class.
        #[arg(long)]
        keep: usize,
        /// Renormalize the retained priors (off by default; removed mass is
        /// meant to be visible in the marginal density).
        #[arg(long)]
        renormalize: bool,
        /// Dataset for the before/after accuracy comparison.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory for the pruned checkpoint and comparison table.
        #[arg(long, default_value = "pruned")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Generate the train/test/OoD splits described by a config.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for `train`, `test`, and `ood` files.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite and print the worst
    /// relative error of every check.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random micro-instances per check.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

/// Runs a parsed command line. The caller maps the error to an exit code
/// via [`Error::is_usage`].
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            threads,
        } => cmd_train(&load_config(&config)?, &out, threads),
        Command::Eval {
            checkpoint,
            dataset,
            out,
            threads,
            abstain_threshold,
        } => cmd_eval(
            &checkpoint,
            &dataset,
            out.as_deref(),
            threads,
            abstain_threshold,
        ),
        Command::Ood {
            checkpoint,
            id_data,
            ood_data,
            out,
            threads,
        } => cmd_ood(&checkpoint, &id_data, &ood_data, out.as_deref(), threads),
        Command::Prune {
            checkpoint,
            keep,
            renormalize,
            dataset,
            out,
            threads,
        } => cmd_prune(
            &checkpoint,
            keep,
            renormalize,
            dataset.as_deref(),
            &out,
            threads,
        ),
        Command::GenData { config, out } => cmd_gen_data(&load_config(&config)?, &out),
        Command::Gradcheck { seed, instances } => cmd_gradcheck(seed, instances),
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn check_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidInput("--threads must be >= 1".into()));
    }
    Ok(())
}

/// Per-step training log as CSV (`step,ce,mining,aux,total`).
fn write_step_csv(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,ce,mining,aux,total")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.step, r.ce, r.mining, r.aux, r.total)?;
    }
    Ok(())
}

/// Everything `summary.json` records about a training run.
#[derive(Debug, serde::Serialize)]
struct TrainSummary {
    seed: u64,
    steps: usize,
    param_count: usize,
    train_accuracy: f64,
    test_accuracy: f64,
    grounded_train_accuracy: f64,
    grounded_test_accuracy: f64,
    abstain_threshold: f64,
    config: ExperimentConfig,
}

/// Trains per the config, grounds the prototypes, and writes all artifacts:
/// `checkpoint.mgp` (+ JSON mirror), `metrics.csv`, `grounding.json`,
/// `bank.csv`, `priors.csv`/`priors.svg`, `summary.json`.
pub fn cmd_train(config: &ExperimentConfig, out: &Path, threads: usize) -> Result<()> {
    check_threads(threads)?;
    std::fs::create_dir_all(out)?;
    let seeds = SeedStream::new(config.seed);
    let spec = config.synthetic_spec()?;
    let train_data = generate_dataset(&spec, &seeds, Split::Train)?;
    let test_data = generate_dataset(&spec, &seeds, Split::Test)?;

    let result = train_on(config, &train_data, &test_data, threads)?;
    let (grounded, records) =
        ground_prototypes(&result.state.net, &result.state.head, &train_data, threads)?;

    let grounded_train = accuracy(
        &predict(&result.state.net, &grounded, &train_data, threads)?,
        &train_data.labels,
    )?;
    let grounded_test = accuracy(
        &predict(&result.state.net, &grounded, &test_data, threads)?,
        &test_data.labels,
    )?;
    let id_scores = scores(&result.state.net, &grounded, &test_data, threads)?;
    let abstain = match config.abstain_threshold {
        Some(t) => t,
        None => default_abstain_threshold(&id_scores)?,
    };

    crate::checkpoint::save(
        &out.join("checkpoint.mgp"),
        &grounded,
        Some(&result.state.net),
    )?;
    write_step_csv(&out.join("metrics.csv"), &result.metrics)?;
    std::fs::write(
        out.join("grounding.json"),
        serde_json::to_string_pretty(&records)?,
    )?;
    crate::bank::export_csv(&result.state.bank, &out.join("bank.csv"))?;
    write_priors_csv(&out.join("priors.csv"), &grounded)?;
    std::fs::write(out.join("priors.svg"), svg_priors(&grounded))?;
    let summary = TrainSummary {
        seed: config.seed,
        steps: result.metrics.len(),
        param_count: result.param_count,
        train_accuracy: result.train_accuracy,
        test_accuracy: result.test_accuracy,
        grounded_train_accuracy: grounded_train,
        grounded_test_accuracy: grounded_test,
        abstain_threshold: abstain,
        config: config.clone(),
    };
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    println!("trained {} steps on seed {}", summary.steps, summary.seed);
    println!("train accuracy {}", summary.train_accuracy);
    println!("test accuracy {}", summary.test_accuracy);
    println!("grounded test accuracy {}", summary.grounded_test_accuracy);
    println!("artifacts in {}", out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(ModelHead, TinyNet)> {
    crate::checkpoint::load_with_net(path)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Ok(load_dataset(path)?.0)
}

/// Evaluates a checkpoint on a dataset: accuracy, per-class confusion
/// counts, optional abstention rate, optional report files.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    out: Option<&Path>,
    threads: usize,
    abstain_threshold: Option<f64>,
) -> Result<()> {
    check_threads(threads)?;
    let (head, net) = load_model(checkpoint)?;
    let data = load_data(dataset)?;
    let predictions = predict(&net, &head, &data, threads)?;
    let acc = accuracy(&predictions, &data.labels)?;
    let c = head.num_classes();
    let mut confusion = vec![vec![0usize; c]; c];
    for (&pred, &label) in predictions.iter().zip(data.labels.iter()) {
        if label < c {
            confusion[label][pred] += 1;
        }
    }

    println!("samples {}", data.len());
    println!("accuracy {acc}");
    let mut rows = vec![MetricRow::new("accuracy", data.split.name(), acc)];
    if let Some(threshold) = abstain_threshold {
        let mut abstained = 0usize;
        for grid in map_featurize(&net, &data, threads)? {
            if classify_or_abstain(&grid, &head, threshold)? == Decision::Abstain {
                abstained += 1;
            }
        }
        let rate = abstained as f64 / data.len() as f64;
        println!("abstention rate {rate} at threshold {threshold}");
        rows.push(MetricRow::new("abstention_rate", data.split.name(), rate));
    }
    for (label, row) in confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        println!("confusion[{label}] {}", cells.join(","));
    }

    if let Some(dir) = out {
        emit_report(dir, &rows, None, Some(&head))?;
        let mut text = String::from("label\\pred");
        for p in 0..c {
            text.push_str(&format!(",{p}"));
        }
        text.push('\n');
        for (label, row) in confusion.iter().enumerate() {
            text.push_str(&label.to_string());
            for v in row {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
        std::fs::write(dir.join("confusion.csv"), text)?;
        println!("report in {}", dir.display());
    }
    Ok(())
}

fn map_featurize(net: &TinyNet, data: &Dataset, threads: usize) -> Result<Vec<crate::density::FeatureGrid>> {
    crate::train::featurize(net, data, threads)
}

/// Scores an ID and an OoD dataset with the marginal density and reports
/// FPR95 and AUROC (plus histogram files when `out` is given).
pub fn cmd_ood(
    checkpoint: &Path,
    id_data: &Path,
    ood_data: &Path,
    out: Option<&Path>,
    threads: usize,
) -> Result<()> {
    check_threads(threads)?;
    let (head, net) = load_model(checkpoint)?;
    let id = load_data(id_data)?;
    let ood = load_data(ood_data)?;
    let set = ScoreSet::new(
        scores(&net, &head, &id, threads)?,
        scores(&net, &head, &ood, threads)?,
    )?;
    let fpr = fpr95(&set)?;
    let threshold = fpr95_threshold(&set)?;
    let area = auroc(&set)?;
    println!("id samples {}", set.id_scores().len());
    println!("ood samples {}", set.ood_scores().len());
    println!("fpr95 {fpr}");
    println!("auroc {area}");
    println!("fpr95 threshold {threshold}");
    if let Some(dir) = out {
        let rows = vec![
            MetricRow::new("fpr95", "ood", fpr),
            MetricRow::new("auroc", "ood", area),
            MetricRow::new("fpr95_threshold", "ood", threshold),
        ];
        emit_report(dir, &rows, Some(&set), Some(&head))?;
        println!("report in {}", dir.display());
    }
    Ok(())
}

/// Prunes a checkpoint to each class's top-prior prototypes and (when a
/// dataset is given) reports accuracy before and after.
pub fn cmd_prune(
    checkpoint: &Path,
    keep: usize,
    renormalize: bool,
    dataset: Option<&Path>,
    out: &Path,
    threads: usize,
) -> Result<()> {
    check_threads(threads)?;
    let loaded = crate::checkpoint::load(checkpoint)?;
    let pruned = prune_head(&loaded.head, keep, renormalize)?;
    std::fs::create_dir_all(out)?;
    crate::checkpoint::save(&out.join("pruned.mgp"), &pruned, loaded.net.as_ref())?;
    println!(
        "kept {keep} of {} prototypes per class",
        loaded.head.num_components()
    );
    if let Some(data_path) = dataset {
        let net = loaded.net.as_ref().ok_or_else(|| Error::Checkpoint {
            path: checkpoint.display().to_string(),
            reason: "accuracy comparison needs the feature-extractor section".into(),
        })?;
        let data = load_data(data_path)?;
        let before = accuracy(&predict(net, &loaded.head, &data, threads)?, &data.labels)?;
        let after = accuracy(&predict(net, &pruned, &data, threads)?, &data.labels)?;
        println!("accuracy {before} -> {after}");
        std::fs::write(
            out.join("comparison.csv"),
            format!("accuracy_before,accuracy_after\n{before},{after}\n"),
        )?;
    }
    println!("pruned checkpoint in {}", out.display());
    Ok(())
}

/// Generates and writes the three splits of the config's synthetic task.
pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let spec = config.synthetic_spec()?;
    let seeds = SeedStream::new(config.seed);
    for split in [Split::Train, Split::Test, Split::Ood] {
        let data = generate_dataset(&spec, &seeds, split)?;
        let stem = out.join(split.name());
        save_dataset(&stem, &data, &spec)?;
        println!(
            "{}: {} samples -> {}.bin",
            split.name(),
            data.len(),
            stem.display()
        );
    }
    Ok(())
}

/// Runs the gradient suite; exits nonzero when any check is over tolerance.
pub fn cmd_gradcheck(seed: u64, instances: usize) -> Result<()> {
    let report = crate::gradcheck::run_gradcheck(seed, instances)?;
    for check in &report.checks {
        println!(
            "{}: max rel err {} (tolerance {}) {}",
            check.name,
            check.max_rel_err,
            check.threshold,
            if check.pass { "ok" } else { "FAIL" }
        );
    }
    if report.all_pass() {
        println!("all {} checks passed", report.checks.len());
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.pass).count();
        Err(Error::Verification(format!(
            "{failed} of {} gradient checks over tolerance",
            report.checks.len()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_every_subcommand() {
        Cli::try_parse_from(["mgproto", "train", "--config", "c.json", "--out", "o"]).unwrap();
        Cli::try_parse_from([
            "mgproto",
            "eval",
            "--checkpoint",
            "c.mgp",
            "--dataset",
            "d.bin",
            "--abstain-threshold",
            "0.5",
        ])
        .unwrap();
        Cli::try_parse_from([
            "mgproto",
            "ood",
            "--checkpoint",
            "c.mgp",
            "--id-data",
            "a.bin",
            "--ood-data",
            "b.bin",
        ])
        .unwrap();
        Cli::try_parse_from([
            "mgproto", "prune", "--checkpoint", "c.mgp", "--keep", "3", "--out", "p",
        ])
        .unwrap();
        Cli::try_parse_from(["mgproto", "gen-data", "--config", "c.json", "--seed", "9"]).unwrap();
        Cli::try_parse_from(["mgproto", "gradcheck", "--instances", "2"]).unwrap();
        assert!(Cli::try_parse_from(["mgproto", "bogus"]).is_err());
        assert!(Cli::try_parse_from(["mgproto", "train"]).is_err());
    }

    #[test]
    fn missing_config_is_a_usage_error_naming_the_path() {
        let args = ConfigArgs {
            config: PathBuf::from("/nonexistent/config.json"),
            seed: None,
        };
        let err = load_config(&args).unwrap_err();
        assert!(err.is_usage());
        assert!(err.to_string().contains("/nonexistent/config.json"));
    }

    #[test]
    fn zero_threads_is_a_usage_error() {
        let err = check_threads(0).unwrap_err();
        assert!(err.is_usage());
    }
}
