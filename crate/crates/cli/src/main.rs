//! `matchrec`: scripted, reproducible runs of the review-matching pipeline.
//!
//! Exit codes: 0 success, 2 input/config error, 3 runtime numerical or
//! model error. Log verbosity is controlled by the `MATCHREC_LOG` env var.

mod manifest;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;

use matchrec_core::corpus::{
    build_documents, compute_corpus_stats, load_split, parse_reviews, save_split, split_dataset,
    DatasetSplit, ParsedReviews,
};
use matchrec_core::embeddings::{load_embeddings, EmbeddingTable};
use matchrec_core::experiments::{
    evaluate, paired_t_test, shuffle_experiment, sparsity_experiment,
};
use matchrec_core::model::{checkpoint, init_params, ModelConfig};
use matchrec_core::training::{fit, global_mean, TrainConfig};
use matchrec_core::{Error, Result};

use manifest::{write_atomic, RunManifest};

#[derive(Parser)]
#[command(name = "matchrec", version, about = "Review-matching recommender pipeline")]
struct Cli {
    /// Worker threads for training and evaluation; 0 uses all cores,
    /// 1 guarantees reproducible output byte for byte
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print corpus statistics for a JSON-lines review file
    Stats {
        /// JSON-lines review file
        #[arg(long)]
        reviews: PathBuf,
        /// Also write stats.json and a run manifest here
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Split a review file into train/validation/test JSON-lines files
    Split {
        #[arg(long)]
        reviews: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Train, validation, test fractions; must sum to 1
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a saved split and write the best checkpoint
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: PathBuf,
        /// JSON file deserializing to a model config; defaults apply if absent
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// JSON file deserializing to a train config; defaults apply if absent
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "eval")]
        label: String,
    },
    /// Re-evaluate with review-shuffled documents, one run per seed
    Shuffle {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
        seeds: Vec<u64>,
    },
    /// Per-review-count cohort MSE on the test split
    Cohorts {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Paired two-tailed t-test between two residual CSV files
    Ttest {
        /// residuals.csv from one eval run
        #[arg(long)]
        residuals_a: PathBuf,
        /// residuals.csv from another eval run over the same test pairs
        #[arg(long)]
        residuals_b: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Inputs shared by every command that consumes a saved split.
#[derive(Args)]
struct DataArgs {
    /// Directory produced by `matchrec split`
    #[arg(long)]
    split_dir: PathBuf,
    /// Word embeddings in text format: token followed by its components
    #[arg(long)]
    embeddings: PathBuf,
    /// Seed for deterministic out-of-vocabulary vectors
    #[arg(long, default_value_t = 0)]
    oov_seed: u64,
}

/// Flag overrides for the train config; flags win over the config file.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Seed for minibatch shuffling
    #[arg(long)]
    rng_seed: Option<u64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.rng_seed {
            cfg.rng_seed = v;
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MATCHREC_LOG")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            eprintln!("error: failed to configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for unusable inputs or configuration, 3 for numerical/model failures.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ShapeMismatch(_) | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Stats { reviews, out_dir } => cmd_stats(&reviews, out_dir.as_deref(), threads),
        Command::Split { reviews, out_dir, ratios, seed } => {
            cmd_split(&reviews, &out_dir, &ratios, seed, threads)
        }
        Command::Train { data, out_dir, model_config, train_config, overrides } => cmd_train(
            &data,
            &out_dir,
            model_config.as_deref(),
            train_config.as_deref(),
            &overrides,
            threads,
        ),
        Command::Eval { checkpoint, data, out_dir, label } => {
            cmd_eval(&checkpoint, &data, &out_dir, &label, threads)
        }
        Command::Shuffle { checkpoint, data, out_dir, seeds } => {
            cmd_shuffle(&checkpoint, &data, &out_dir, &seeds, threads)
        }
        Command::Cohorts { checkpoint, data, out_dir } => {
            cmd_cohorts(&checkpoint, &data, &out_dir, threads)
        }
        Command::Ttest { residuals_a, residuals_b, out_dir } => {
            cmd_ttest(&residuals_a, &residuals_b, out_dir.as_deref(), threads)
        }
    }
}

fn read_reviews(path: &Path) -> Result<ParsedReviews> {
    let f = File::open(path)
        .map_err(|e| Error::invalid_input(format!("{}: {e}", path.display())))?;
    let parsed = parse_reviews(BufReader::new(f))?;
    for s in &parsed.skipped {
        warn!("{}: line {} skipped: {}", path.display(), s.line, s.reason);
    }
    Ok(parsed)
}

fn cmd_stats(reviews: &Path, out_dir: Option<&Path>, threads: usize) -> Result<()> {
    let parsed = read_reviews(reviews)?;
    let stats = compute_corpus_stats(&parsed.records);
    let rendered = serde_json::to_string_pretty(&stats)?;
    println!("{rendered}");
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("stats.json"), format!("{rendered}\n").as_bytes())?;
        let mut man = RunManifest::new("stats", threads, json!({}));
        man.add_input("reviews", reviews)?;
        man.write(dir)?;
    }
    Ok(())
}

fn cmd_split(
    reviews: &Path,
    out_dir: &Path,
    ratios: &[f64],
    seed: u64,
    threads: usize,
) -> Result<()> {
    let parsed = read_reviews(reviews)?;
    let ratios = (ratios[0], ratios[1], ratios[2]);
    let split = split_dataset(&parsed.records, ratios, seed)?;
    info!(
        "split {} records into {}/{}/{}",
        parsed.records.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    // write into a scratch dir first, then rename each file into place
    std::fs::create_dir_all(out_dir)?;
    let scratch = tempfile::tempdir_in(out_dir)?;
    save_split(scratch.path(), &split)?;
    for name in ["train.jsonl", "validation.jsonl", "test.jsonl", "manifest.json"] {
        std::fs::rename(scratch.path().join(name), out_dir.join(name))?;
    }
    let mut man = RunManifest::new(
        "split",
        threads,
        json!({ "ratios": [ratios.0, ratios.1, ratios.2], "seed": seed }),
    );
    man.add_input("reviews", reviews)?;
    man.write(out_dir)?;
    Ok(())
}

/// Load split, embeddings, and documents, recording every input digest.
fn load_data(data: &DataArgs, man: &mut RunManifest) -> Result<(DatasetSplit, EmbeddingTable)> {
    for name in ["train.jsonl", "validation.jsonl", "test.jsonl"] {
        man.add_input(name, &data.split_dir.join(name))?;
    }
    man.add_input("embeddings", &data.embeddings)?;
    let split = load_split(&data.split_dir)?;
    let table = load_embeddings(&data.embeddings, data.oov_seed)?;
    info!(
        "loaded {} train / {} validation / {} test records, {} embeddings of dim {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        table.len(),
        table.dim()
    );
    Ok((split, table))
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
    man: &mut RunManifest,
    label: &str,
) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            man.add_input(label, p)?;
            let f = File::open(p)
                .map_err(|e| Error::invalid_input(format!("{}: {e}", p.display())))?;
            serde_json::from_reader(BufReader::new(f)).map_err(|e| {
                Error::invalid_config(format!("{} ({label}): {e}", p.display()))
            })
        }
    }
}

fn cmd_train(
    data: &DataArgs,
    out_dir: &Path,
    model_config: Option<&Path>,
    train_config: Option<&Path>,
    overrides: &TrainOverrides,
    threads: usize,
) -> Result<()> {
    let mut man = RunManifest::new("train", threads, json!(null));
    let (split, table) = load_data(data, &mut man)?;
    let model_cfg: ModelConfig = load_json_config(model_config, &mut man, "model_config")?;
    let mut train_cfg: TrainConfig = load_json_config(train_config, &mut man, "train_config")?;
    overrides.apply(&mut train_cfg);
    man.config = json!({
        "model": model_cfg,
        "train": train_cfg,
        "oov_seed": data.oov_seed,
        "embedding_dim": table.dim(),
    });

    let docs = build_documents(&split);
    let model = init_params(&model_cfg)?;
    let (best, report) = fit(model, &split.train, &split.validation, &docs, &table, &train_cfg)?;

    std::fs::create_dir_all(out_dir)?;
    let mut ckpt = Vec::new();
    checkpoint::save(&best, &mut ckpt)?;
    write_atomic(&out_dir.join("checkpoint.bin"), &ckpt)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_atomic(&out_dir.join("train_report.csv"), &csv)?;
    man.write(out_dir)?;

    match report.best_epoch {
        Some(best_epoch) => {
            let best_val = report.epochs[best_epoch].val_mse;
            println!(
                "trained {} epochs; best epoch {best_epoch} with validation MSE {best_val:.6}",
                report.epochs.len()
            );
        }
        None => println!("max_epochs 0: wrote the initial checkpoint unchanged"),
    }
    Ok(())
}

fn load_checkpoint(path: &Path, man: &mut RunManifest) -> Result<matchrec_core::model::CnnRegressor> {
    man.add_input("checkpoint", path)?;
    checkpoint::load_from_path(path)
}

fn cmd_eval(
    ckpt_path: &Path,
    data: &DataArgs,
    out_dir: &Path,
    label: &str,
    threads: usize,
) -> Result<()> {
    let mut man = RunManifest::new("eval", threads, json!({ "label": label }));
    let model = load_checkpoint(ckpt_path, &mut man)?;
    let (split, table) = load_data(data, &mut man)?;
    man.config = json!({
        "label": label,
        "model": model.config,
        "oov_seed": data.oov_seed,
        "embedding_dim": table.dim(),
    });

    let docs = build_documents(&split);
    let mean = global_mean(&split.train);
    let report = evaluate(&model, &split.test, &docs, &table, mean, label)?;

    let mut csv = Vec::new();
    report.write_residuals_csv(&mut csv)?;
    write_atomic(&out_dir.join("residuals.csv"), &csv)?;
    let summary = json!({
        "label": report.label,
        "mse": report.mse,
        "n_test": report.n_test,
        "n_fallback": report.n_fallback,
        "global_mean": mean,
    });
    write_atomic(&out_dir.join("eval.json"), serde_json::to_vec_pretty(&summary)?.as_slice())?;
    man.write(out_dir)?;
    println!(
        "test MSE {:.6} over {} pairs ({} fell back to the global mean {:.4})",
        report.mse, report.n_test, report.n_fallback, mean
    );
    Ok(())
}

fn cmd_shuffle(
    ckpt_path: &Path,
    data: &DataArgs,
    out_dir: &Path,
    seeds: &[u64],
    threads: usize,
) -> Result<()> {
    let mut man = RunManifest::new("shuffle", threads, json!({ "seeds": seeds }));
    let model = load_checkpoint(ckpt_path, &mut man)?;
    let (split, table) = load_data(data, &mut man)?;
    let docs = build_documents(&split);
    let mean = global_mean(&split.train);
    let report = shuffle_experiment(&model, &split.test, &docs, &table, mean, seeds)?;

    let mut csv = String::from("seed,mse,abs_delta,rel_delta\n");
    for r in &report.runs {
        csv.push_str(&format!(
            "{},{:.17},{:.17},{:.17}\n",
            r.seed, r.mse, r.abs_delta, r.rel_delta
        ));
    }
    write_atomic(&out_dir.join("shuffle.csv"), csv.as_bytes())?;
    write_atomic(
        &out_dir.join("shuffle.json"),
        serde_json::to_vec_pretty(&report)?.as_slice(),
    )?;
    man.write(out_dir)?;
    for r in &report.runs {
        println!(
            "seed {}: MSE {:.6} (delta {:+.2}% of baseline {:.6})",
            r.seed,
            r.mse,
            100.0 * (r.mse - report.baseline_mse) / report.baseline_mse,
            report.baseline_mse
        );
    }
    Ok(())
}

fn cmd_cohorts(ckpt_path: &Path, data: &DataArgs, out_dir: &Path, threads: usize) -> Result<()> {
    let mut man = RunManifest::new("cohorts", threads, json!({}));
    let model = load_checkpoint(ckpt_path, &mut man)?;
    let (split, table) = load_data(data, &mut man)?;
    let docs = build_documents(&split);
    let mean = global_mean(&split.train);
    let report =
        sparsity_experiment(&model, &split.test, &split.train, &docs, &table, mean)?;

    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    write_atomic(&out_dir.join("cohorts.csv"), &csv)?;
    man.write(out_dir)?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

/// Squared errors keyed by test pair, read back from a residuals CSV.
fn read_residuals(path: &Path) -> Result<BTreeMap<(String, String), f64>> {
    let f = File::open(path)
        .map_err(|e| Error::invalid_input(format!("{}: {e}", path.display())))?;
    let mut rdr = csv::Reader::from_reader(BufReader::new(f));
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::invalid_input(format!("{}: {e}", path.display())))?;
        let (Some(user), Some(item), Some(sq)) = (row.get(0), row.get(1), row.get(4)) else {
            return Err(Error::invalid_input(format!(
                "{}: expected the residuals.csv column layout",
                path.display()
            )));
        };
        let sq: f64 = sq.parse().map_err(|e| {
            Error::invalid_input(format!("{}: bad sq_error for ({user},{item}): {e}", path.display()))
        })?;
        if out.insert((user.to_string(), item.to_string()), sq).is_some() {
            return Err(Error::invalid_input(format!(
                "{}: duplicate pair ({user},{item})",
                path.display()
            )));
        }
    }
    Ok(out)
}

fn cmd_ttest(
    path_a: &Path,
    path_b: &Path,
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<()> {
    let a = read_residuals(path_a)?;
    let b = read_residuals(path_b)?;
    if a.keys().ne(b.keys()) {
        return Err(Error::invalid_input(
            "residual files cover different test pairs; t-test pairing is undefined",
        ));
    }
    let xs: Vec<f64> = a.values().copied().collect();
    let ys: Vec<f64> = b.values().copied().collect();
    let result = paired_t_test(&xs, &ys)?;
    let rendered = serde_json::to_string_pretty(&json!({
        "n": xs.len(),
        "t": result.t,
        "p": result.p,
        "degrees_of_freedom": result.degrees_of_freedom,
        "degenerate": result.degenerate,
    }))?;
    println!("{rendered}");
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("ttest.json"), format!("{rendered}\n").as_bytes())?;
        let mut man = RunManifest::new("ttest", threads, json!({}));
        man.add_input("residuals_a", path_a)?;
        man.add_input("residuals_b", path_b)?;
        man.write(dir)?;
    }
    Ok(())
}
