//! Command-line entry point: dataset generation, teacher training, feature
//! extraction, distillation, evaluation, and cross-run reporting.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical
//! failure (non-finite loss). Every run writes a `run.json` manifest into
//! the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::data_io::{gen_synthetic, read_dataset, write_dataset, write_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::eval::{
    make_pairs, rank1_id, similarity_distributions, smr_tmr_histogram, tar_at_far,
    write_metrics_csv, write_scores_csv, MetricRow,
};
use crate::mining::{bank_init, build_informative_sets, compute_prototypes};
use crate::model::{load_model, save_model};
use crate::pipeline::{
    distill, extract_features, train_teacher, RunConfig, STREAM_BANK_INIT, STREAM_EVAL_PAIRS,
    STREAM_PROBE,
};
use crate::vec_math::{derive_seed, Matrix};

#[derive(Parser)]
#[command(
    name = "coupleface",
    about = "Relation-aware embedding distillation experiments",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Config override, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed override, applied last.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic identity dataset.
    GenData(RunArgs),
    /// Train the teacher model with the recognition loss.
    TrainTeacher(RunArgs),
    /// Extract embeddings for a dataset with a saved model.
    Extract(RunArgs),
    /// Distill a saved teacher into a fresh student.
    Distill(RunArgs),
    /// Compute verification/identification metrics for a saved model.
    Eval(RunArgs),
    /// Render a comparison table from run directories.
    Report {
        /// Run directories containing metrics.csv.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

/// Parse arguments and execute; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::GenData(args) => with_config(args, "gen-data", cmd_gen_data),
        Command::TrainTeacher(args) => with_config(args, "train-teacher", cmd_train_teacher),
        Command::Extract(args) => with_config(args, "extract", cmd_extract),
        Command::Distill(args) => with_config(args, "distill", cmd_distill),
        Command::Eval(args) => with_config(args, "eval", cmd_eval),
        Command::Report { run_dirs } => cmd_report(run_dirs),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFiniteLoss { .. } => 3,
                _ => 2,
            }
        }
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override must be KEY=VALUE: {kv}")))?;
        cfg.set(key.trim(), value)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_config(
    args: &RunArgs,
    command: &'static str,
    f: impl FnOnce(&RunConfig, &Path) -> Result<()>,
) -> Result<()> {
    let cfg = load_config(args)?;
    std::fs::create_dir_all(&args.out)?;
    f(&cfg, &args.out)?;
    write_manifest(&args.out, command, &cfg)
}

#[derive(serde::Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    format_versions: BTreeMap<&'static str, u32>,
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    let manifest = RunManifest {
        command,
        seed: cfg.seed,
        config: cfg,
        format_versions: BTreeMap::from([
            ("cfds", crate::data_io::FORMAT_VERSION),
            ("cfem", crate::data_io::FORMAT_VERSION),
            ("cfmd", crate::model::MODEL_VERSION),
            ("cfhs", crate::mining::SETS_VERSION),
        ]),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    crate::binio::atomic_write(&out.join("run.json"), json.as_bytes())
}

fn require<'a>(opt: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    opt.as_deref()
        .ok_or_else(|| Error::Config(format!("missing required config key: {key}")))
}

fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = gen_synthetic(
        cfg.gen_m,
        cfg.gen_per_id,
        cfg.input_dim,
        cfg.gen_noise_sigma,
        cfg.seed,
    )?;
    write_dataset(&out.join("dataset.cfds"), &ds)?;
    println!(
        "wrote dataset.cfds: {} samples, {} identities, dim {}",
        ds.len(),
        ds.num_identities,
        ds.input_dim()
    );
    Ok(())
}

fn cmd_train_teacher(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = read_dataset(require(&cfg.dataset, "dataset")?)?;
    let (teacher, log) = train_teacher(cfg, &ds)?;
    save_model(&out.join("teacher.cfmd"), &teacher)?;
    log.write_csv(&out.join("train_log.csv"))?;
    if let Some(s) = log.summary() {
        println!("teacher trained: {} iters, final loss {}", s.iters, s.final_loss_total);
    }
    Ok(())
}

fn cmd_extract(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = load_model(require(&cfg.checkpoint, "checkpoint")?)?;
    let ds = read_dataset(require(&cfg.dataset, "dataset")?)?;
    let emb = extract_features(&model, &ds)?;
    write_embeddings(&out.join("embeddings.cfem"), &emb)?;
    println!("wrote embeddings.cfem: {} rows, dim {}", emb.len(), emb.dim());
    Ok(())
}

fn cmd_distill(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = read_dataset(require(&cfg.dataset, "dataset")?)?;
    let teacher = load_model(require(&cfg.teacher_checkpoint, "teacher_checkpoint")?)?;
    let outcome = distill(cfg, &teacher, &ds)?;
    save_model(&out.join("student.cfmd"), &outcome.student)?;
    outcome.log.write_csv(&out.join("train_log.csv"))?;
    outcome.sets.save(&out.join("informative_sets.cfhs"))?;
    if let Some(s) = outcome.log.summary() {
        println!(
            "distilled ({}): {} iters, final loss {}",
            cfg.mode.as_str(),
            s.iters,
            s.final_loss_total
        );
    }
    Ok(())
}

/// Gallery = the first sample of each identity; probes = the rest.
fn split_gallery_probes(emb: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
    let mut gallery_rows: Vec<usize> = Vec::new();
    let mut probe_rows: Vec<usize> = Vec::new();
    let mut seen = vec![false; emb.num_identities];
    for (i, &y) in emb.labels.iter().enumerate() {
        if seen[y as usize] {
            probe_rows.push(i);
        } else {
            seen[y as usize] = true;
            gallery_rows.push(i);
        }
    }
    let gallery = EmbeddingMatrix::new(
        emb.features.gather_rows(&gallery_rows),
        gallery_rows.iter().map(|&i| emb.labels[i]).collect(),
        emb.num_identities,
    )?;
    let probes = EmbeddingMatrix::new(
        emb.features.gather_rows(&probe_rows),
        probe_rows.iter().map(|&i| emb.labels[i]).collect(),
        emb.num_identities,
    )?;
    Ok((gallery, probes))
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = load_model(require(&cfg.checkpoint, "checkpoint")?)?;
    let eval_ds = match &cfg.eval_dataset {
        Some(path) => read_dataset(path)?,
        None => gen_synthetic(
            cfg.eval_m,
            cfg.eval_per_id,
            model.spec.input_dim,
            cfg.eval_noise_sigma,
            cfg.eval_seed,
        )?,
    };
    let emb = extract_features(&model, &eval_ds)?;
    let pairs = make_pairs(
        &emb,
        cfg.eval_pos_pairs,
        cfg.eval_neg_pairs,
        derive_seed(cfg.eval_seed, STREAM_EVAL_PAIRS),
    )?;
    let (pos, neg) = similarity_distributions(&emb, &pairs)?;
    let mut rows = Vec::new();
    for &far in &cfg.eval_far {
        let (tar, _) = tar_at_far(&pos, &neg, far)?;
        rows.push(MetricRow {
            metric: "tar_at_far".into(),
            operating_point: format!("{far}"),
            value: tar,
            n_pos: pos.len(),
            n_neg: neg.len(),
        });
    }
    let distractors = if cfg.eval_distractors >= 2 {
        let dds = gen_synthetic(
            cfg.eval_distractors,
            1,
            model.spec.input_dim,
            cfg.eval_noise_sigma,
            cfg.eval_distractor_seed,
        )?;
        extract_features(&model, &dds)?.features
    } else {
        Matrix::zeros(0, model.spec.embed_dim)
    };
    let (gallery, probes) = split_gallery_probes(&emb)?;
    let rank1 = rank1_id(&probes, &gallery, &distractors)?;
    rows.push(MetricRow {
        metric: "rank1".into(),
        operating_point: format!("{}", distractors.rows()),
        value: rank1,
        n_pos: probes.len(),
        n_neg: distractors.rows(),
    });
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    write_scores_csv(&out.join("scores.csv"), &pos, &neg)?;

    // Relation-difference histogram against the training set, when the
    // teacher and training data are available.
    if let (Some(ds_path), Some(teacher_path)) = (&cfg.dataset, &cfg.teacher_checkpoint) {
        let train_ds = read_dataset(ds_path)?;
        let teacher = load_model(teacher_path)?;
        let teacher_features = extract_features(&teacher, &train_ds)?;
        let protos = compute_prototypes(&teacher_features)?;
        let sets = build_informative_sets(&protos, cfg.k)?;
        let bank = bank_init(&teacher_features, derive_seed(cfg.seed, STREAM_BANK_INIT))?;
        let probe_rows = probe_indices(train_ds.len(), cfg.probe_size, cfg.seed);
        let probe_inputs = train_ds.inputs.gather_rows(&probe_rows);
        let probe_labels: Vec<u32> = probe_rows.iter().map(|&i| train_ds.labels[i]).collect();
        let probe_teacher = teacher_features.features.gather_rows(&probe_rows);
        let hist = smr_tmr_histogram(
            &model,
            &probe_inputs,
            &probe_labels,
            &probe_teacher,
            &bank,
            &sets,
            cfg.hist_bins,
        )?;
        hist.write_csv(&out.join("histogram.csv"))?;
    }
    for r in &rows {
        println!("{} @ {}: {}", r.metric, r.operating_point, r.value);
    }
    Ok(())
}

/// Seeded sample of `size` distinct indices (all of them when fewer exist).
pub fn probe_indices(len: usize, size: usize, seed: u64) -> Vec<usize> {
    use rand::RngExt;
    let mut all: Vec<usize> = (0..len).collect();
    let take = size.min(len);
    let mut rng = crate::vec_math::seeded_rng(derive_seed(seed, STREAM_PROBE));
    for slot in 0..take {
        let j = rng.random_range(slot..all.len());
        all.swap(slot, j);
    }
    all.truncate(take);
    all
}

fn cmd_report(run_dirs: &[PathBuf]) -> Result<()> {
    print!("{}", render_report(run_dirs)?);
    Ok(())
}

/// Aligned text table comparing runs; cell values are copied verbatim from
/// each run's metrics.csv.
pub fn render_report(run_dirs: &[PathBuf]) -> Result<String> {
    let mut columns: Vec<String> = Vec::new();
    let mut rows: Vec<(String, BTreeMap<String, String>)> = Vec::new();
    for dir in run_dirs {
        let path = dir.join("metrics.csv");
        let text = std::fs::read_to_string(&path)
            .map_err(|_| Error::MissingMetrics(path.display().to_string()))?;
        let mut cells = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::MissingMetrics(format!(
                    "{}: malformed line {}",
                    path.display(),
                    i + 1
                )));
            }
            let col = format!("{}@{}", fields[0], fields[1]);
            if !columns.contains(&col) {
                columns.push(col.clone());
            }
            cells.insert(col, fields[2].to_string());
        }
        rows.push((dir.display().to_string(), cells));
    }
    let mut widths: Vec<usize> = columns.iter().map(String::len).collect();
    let mut name_width = "run".len();
    for (name, cells) in &rows {
        name_width = name_width.max(name.len());
        for (c, col) in columns.iter().enumerate() {
            if let Some(v) = cells.get(col) {
                widths[c] = widths[c].max(v.len());
            }
        }
    }
    let mut out = String::new();
    out.push_str(&format!("{:<name_width$}", "run"));
    for (c, col) in columns.iter().enumerate() {
        out.push_str(&format!("  {:>w$}", col, w = widths[c]));
    }
    out.push('\n');
    for (name, cells) in &rows {
        out.push_str(&format!("{:<name_width$}", name));
        for (c, col) in columns.iter().enumerate() {
            let v = cells.get(col).map(String::as_str).unwrap_or("-");
            out.push_str(&format!("  {:>w$}", v, w = widths[c]));
        }
        out.push('\n');
    }
    Ok(out)
}
