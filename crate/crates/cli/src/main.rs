use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use citab_core::checkpoint::Checkpoint;
use citab_core::config::TrainConfig;
use citab_core::diagnostics::{export_diagnostics, write_vectors_csv};
use citab_core::header::HeaderEmbedder;
use citab_core::metrics::MetricsReport;
use citab_core::model::{model_grad_check, CitabModel};
use citab_core::synth::{bayes_reference, generate, write_dataset, SynthSpec};
use citab_core::train::{self, CohortData};
use citab_core::Tensor;

#[derive(Parser)]
#[command(name = "citab", version, about = "Cross-tabular image-tabular pretraining and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-cohort dataset.
    Gen {
        /// Generator spec (TOML). Without it the built-in 3-cohort config is used.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Seed for the built-in config.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining over every cohort in the config.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Single-threaded, bitwise-reproducible execution.
        #[arg(long)]
        deterministic: bool,
    },
    /// Supervised fine-tuning on one cohort, from a checkpoint or from scratch.
    Finetune {
        /// Pretrained checkpoint. Omit to train from the seeded initialization.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Cohort id from the config, or a cohort directory.
        #[arg(long)]
        cohort: String,
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to `<ckpt>/finetuned-<cohort>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a fine-tuned model on one split of a cohort.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cohort: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Metrics CSV; defaults to `<model>/metrics-<cohort>-<split>.csv`.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Export expert histograms, embeddings, prototypes and header similarities.
    InspectExperts {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cohort: String,
        /// Output directory; defaults to `<model>/diagnostics`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every model gradient on a tiny configuration.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { spec, seed, out } => gen(spec.as_deref(), seed, &out),
        Command::Pretrain { config, out, deterministic } => pretrain(&config, out, deterministic),
        Command::Finetune { ckpt, cohort, config, out } => finetune(ckpt.as_deref(), &cohort, &config, out),
        Command::Eval { model, cohort, split, csv } => eval(&model, &cohort, &split, csv),
        Command::InspectExperts { model, cohort, out } => inspect(&model, &cohort, out),
        Command::Gradcheck { seed, eps, tol } => gradcheck(seed, eps, tol),
    }
}

fn gen(spec: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default_config(seed),
    };
    let data = generate(&spec)?;
    write_dataset(out, &spec, &data)?;
    for d in &data {
        println!(
            "{}: {} subjects, {} columns, Bayes reference accuracy {:.4}",
            d.cohort.schema().cohort_id,
            d.cohort.n_rows(),
            d.cohort.n_columns(),
            bayes_reference(&spec.latent, d)?
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn pretrain(config: &Path, out: Option<PathBuf>, deterministic: bool) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let out = out.or_else(|| cfg.output_dir.clone()).ok_or_else(|| anyhow!("no --out given and no output_dir in the config"))?;
    if deterministic {
        // Training never spawns threads; the flag documents the guarantee.
        log::info!("deterministic mode: single-threaded execution");
    }
    let data: Vec<CohortData> = train::load_cohorts(&cfg)?.into_iter().map(CohortData::without_labels).collect();
    if data.is_empty() {
        bail!("the config lists no cohorts");
    }
    let rows: Vec<Vec<usize>> = data.iter().map(|d| train::cohort_splits(&cfg, d).train).collect();
    let mut model = CitabModel::new(&cfg.model, cfg.train.seed)?;
    let start = Instant::now();
    let report = train::pretrain(&mut model, &data, &rows, &cfg)?;
    Checkpoint::from_store(&model.store, cfg.to_toml_string(), report.steps, report.epoch_losses.clone()).save(&out)?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in report.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:?}\n", e + 1));
    }
    std::fs::write(out.join("loss.csv"), csv)?;
    println!(
        "pretrained {} steps over {} cohorts in {:.1}s; final epoch loss {:.6}",
        report.steps,
        data.len(),
        start.elapsed().as_secs_f64(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn find_cohort(cfg: &TrainConfig, embedder: &HeaderEmbedder, name: &str) -> Result<CohortData> {
    let dir = Path::new(name);
    if dir.is_dir() {
        return Ok(CohortData::load(dir, embedder)?);
    }
    for path in &cfg.data.cohorts {
        let d = CohortData::load(path, embedder)?;
        if d.id == name {
            return Ok(d);
        }
    }
    bail!("no cohort `{name}` among {:?}", cfg.data.cohorts)
}

fn load_model(dir: &Path) -> Result<(TrainConfig, CitabModel)> {
    let ck = Checkpoint::load(dir)?;
    let cfg = TrainConfig::from_toml_str(&ck.config).with_context(|| format!("config snapshot in {}", dir.display()))?;
    let mut model = CitabModel::new(&cfg.model, cfg.train.seed)?;
    ck.apply(&mut model.store)?;
    Ok((cfg, model))
}

fn labels_for(data: &CohortData, rows: &[usize]) -> Result<Vec<usize>> {
    let labels = data.labels.as_ref().ok_or_else(|| anyhow!("cohort `{}` has no labels", data.id))?;
    Ok(rows.iter().map(|&r| labels[r]).collect())
}

fn write_predictions(path: &Path, rows: &[usize], labels: &[usize], probs: &Tensor) -> Result<()> {
    let meta: Vec<Vec<String>> = rows.iter().zip(labels).map(|(r, y)| vec![r.to_string(), y.to_string()]).collect();
    write_vectors_csv(path, &["row", "label"], &meta, "p", probs)?;
    Ok(())
}

fn write_metrics(path: &Path, split: &str, m: &MetricsReport) -> Result<()> {
    std::fs::write(path, format!("{}\n{}\n", MetricsReport::csv_header(), m.csv_row(split)))?;
    Ok(())
}

fn finetune(ckpt: Option<&Path>, cohort: &str, config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let mut model = CitabModel::new(&cfg.model, cfg.train.seed)?;
    if let Some(dir) = ckpt {
        Checkpoint::load(dir)?.apply(&mut model.store).context("checkpoint does not match the model config")?;
    }
    let out = match (out, ckpt) {
        (Some(o), _) => o,
        (None, Some(c)) => c.join(format!("finetuned-{cohort}")),
        (None, None) => bail!("--out is required when fine-tuning from scratch"),
    };
    let embedder = train::header_embedder(&cfg)?;
    let data = find_cohort(&cfg, &embedder, cohort)?;
    let splits = train::cohort_splits(&cfg, &data);
    let labeled = train::label_subset(&splits.train, cfg.train.label_fraction, cfg.train.seed);
    let report = train::finetune(&mut model, &data, &labeled, &splits.val, &cfg)?;
    Checkpoint::from_store(&model.store, cfg.to_toml_string(), report.best_epoch as u64, report.train_losses.clone())
        .save(&out)?;
    let probs = train::predict(&model, &data, &splits.val)?;
    write_predictions(&out.join("predictions-val.csv"), &splits.val, &labels_for(&data, &splits.val)?, &probs)?;
    write_metrics(&out.join("metrics-val.csv"), "val", &report.val_metrics)?;
    println!(
        "fine-tuned on {} labeled rows of `{}`; best epoch {} of {}",
        labeled.len(),
        data.id,
        report.best_epoch,
        cfg.train.finetune_epochs
    );
    print!("{}", report.val_metrics);
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(model_dir: &Path, cohort: &str, split: &str, csv: Option<PathBuf>) -> Result<()> {
    let (cfg, model) = load_model(model_dir)?;
    let embedder = train::header_embedder(&cfg)?;
    let data = find_cohort(&cfg, &embedder, cohort)?;
    let splits = train::cohort_splits(&cfg, &data);
    let rows = splits.get(split)?;
    let (probs, report) = train::evaluate(&model, &data, rows)?;
    let csv = csv.unwrap_or_else(|| model_dir.join(format!("metrics-{}-{split}.csv", data.id)));
    write_metrics(&csv, split, &report)?;
    write_predictions(&csv.with_file_name(format!("predictions-{}-{split}.csv", data.id)), rows, &labels_for(&data, rows)?, &probs)?;
    println!("cohort {} split {split}", data.id);
    print!("{report}");
    println!("wrote {}", csv.display());
    Ok(())
}

fn inspect(model_dir: &Path, cohort: &str, out: Option<PathBuf>) -> Result<()> {
    let (cfg, model) = load_model(model_dir)?;
    let embedder = train::header_embedder(&cfg)?;
    let data = find_cohort(&cfg, &embedder, cohort)?;
    let out = out.unwrap_or_else(|| model_dir.join("diagnostics"));
    let summary = export_diagnostics(&model, std::slice::from_ref(&data), &embedder, &out)?;
    for (id, hist) in &summary.histograms {
        println!("argmax-expert ratios, cohort {id}");
        for (col, ratios) in &hist.columns {
            let cells: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
            println!("  {col:<32} {}", cells.join("  "));
        }
    }
    if let Some(s) = summary.header_similarity {
        println!("mean pairwise header cosine {s:.4}");
    }
    println!("wrote {} files to {}", summary.files.len(), out.display());
    Ok(())
}

fn gradcheck(seed: u64, eps: f64, tol: f64) -> Result<()> {
    let start = Instant::now();
    let [ssl, cls] = model_grad_check(seed, 3, eps)?;
    for (name, r) in [("pretraining loss", &ssl), ("classification loss", &cls)] {
        println!(
            "{name}: {} coordinates, max rel. error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            r.checked, r.max_rel_error, r.worst_param, r.worst_index, r.worst_analytic, r.worst_numeric
        );
    }
    println!("{:.1}s", start.elapsed().as_secs_f64());
    let worst = ssl.max_rel_error.max(cls.max_rel_error);
    if worst > tol {
        bail!("max relative error {worst:.3e} exceeds {tol:.1e}");
    }
    Ok(())
}
