//! Experiment orchestration: run configuration, LR and loss-weight
//! schedules, teacher training, feature extraction, and the distillation
//! loop with its mining preamble.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::binio;
use crate::data_io::{batch_iter, read_embeddings, EmbeddingMatrix, LabeledDataset};
use crate::distill_losses::{fcd_loss, rad_loss, rad_loss_inbatch, RadKind, RadVariant};
use crate::error::{Error, Result};
use crate::mining::{
    bank_init, bank_update, build_informative_sets, compute_prototypes, gather_negatives,
    random_informative_sets, FeatureBank, InformativeSets,
};
use crate::model::{
    arcface_loss, mlp_backward, mlp_forward, mlp_init, sgd_step, sgd_update, ArcHead, MlpModel,
    MlpSpec, SgdState,
};
use crate::vec_math::{derive_seed, Matrix};

/// Sub-seed streams, so independent random consumers never collide.
pub const STREAM_TEACHER_INIT: u64 = 1;
pub const STREAM_TEACHER_HEAD: u64 = 2;
pub const STREAM_TEACHER_EPOCHS: u64 = 3;
pub const STREAM_STUDENT_INIT: u64 = 4;
pub const STREAM_STUDENT_HEAD: u64 = 5;
pub const STREAM_EPOCHS: u64 = 6;
pub const STREAM_BANK_INIT: u64 = 7;
pub const STREAM_RANDOM_SETS: u64 = 8;
pub const STREAM_EVAL_PAIRS: u64 = 9;
pub const STREAM_PROBE: u64 = 10;

/// Experiment variant. The ablation modes swap out parts of the relation
/// loss: A uses the unfiltered absolute form, B drops the margin, C builds
/// relations between in-batch student embeddings, D replaces the mined
/// identity sets by random ones, E takes negatives from the batch instead
/// of the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RunMode {
    #[serde(rename = "arcface_only")]
    ArcfaceOnly,
    #[serde(rename = "fcd_only")]
    FcdOnly,
    #[serde(rename = "coupleface")]
    Coupleface,
    #[serde(rename = "coupleface_plus")]
    CouplefacePlus,
    #[serde(rename = "ablation_A")]
    AblationA,
    #[serde(rename = "ablation_B")]
    AblationB,
    #[serde(rename = "ablation_C")]
    AblationC,
    #[serde(rename = "ablation_D")]
    AblationD,
    #[serde(rename = "ablation_E")]
    AblationE,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "arcface_only" => Self::ArcfaceOnly,
            "fcd_only" => Self::FcdOnly,
            "coupleface" => Self::Coupleface,
            "coupleface_plus" => Self::CouplefacePlus,
            "ablation_A" => Self::AblationA,
            "ablation_B" => Self::AblationB,
            "ablation_C" => Self::AblationC,
            "ablation_D" => Self::AblationD,
            "ablation_E" => Self::AblationE,
            _ => return Err(Error::Config(format!("unknown mode: {s}"))),
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::ArcfaceOnly => "arcface_only",
            Self::FcdOnly => "fcd_only",
            Self::Coupleface => "coupleface",
            Self::CouplefacePlus => "coupleface_plus",
            Self::AblationA => "ablation_A",
            Self::AblationB => "ablation_B",
            Self::AblationC => "ablation_C",
            Self::AblationD => "ablation_D",
            Self::AblationE => "ablation_E",
        }
    }
}

/// Flat run configuration. Every field maps to one `key = value` line in
/// the config file; see the README for the key list.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub mining_embeddings: Option<PathBuf>,

    pub input_dim: usize,
    pub embed_dim: usize,
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_iters: u64,
    /// (iteration, divisor) pairs; the LR is divided by each divisor once
    /// that iteration is reached.
    pub lr_milestones: Vec<(u64, f64)>,
    pub batch_size: usize,

    pub k: usize,
    pub rad_variant: RadKind,
    pub q: f64,
    pub alpha: f64,
    /// (start_iteration, beta) pairs; the last entry at or before the
    /// current iteration applies.
    pub beta_schedule: Vec<(u64, f64)>,

    pub arc_scale: f64,
    pub arc_margin: f64,

    pub gen_m: usize,
    pub gen_per_id: usize,
    pub gen_noise_sigma: f64,

    pub eval_dataset: Option<PathBuf>,
    pub eval_m: usize,
    pub eval_per_id: usize,
    pub eval_seed: u64,
    pub eval_noise_sigma: f64,
    pub eval_pos_pairs: usize,
    pub eval_neg_pairs: usize,
    pub eval_far: Vec<f64>,
    pub eval_distractors: usize,
    pub eval_distractor_seed: u64,
    pub probe_size: usize,
    pub hist_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: RunMode::Coupleface,
            dataset: None,
            checkpoint: None,
            teacher_checkpoint: None,
            mining_embeddings: None,
            input_dim: 64,
            embed_dim: 32,
            teacher_hidden: vec![256, 128],
            student_hidden: vec![64],
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            total_iters: 4000,
            lr_milestones: vec![(1800, 10.0), (2800, 10.0), (3600, 10.0)],
            batch_size: 128,
            k: 20,
            rad_variant: RadKind::Margin,
            q: 0.03,
            alpha: 1.0,
            beta_schedule: vec![(0, 0.0)],
            arc_scale: 16.0,
            arc_margin: 0.3,
            gen_m: 200,
            gen_per_id: 50,
            gen_noise_sigma: 0.12,
            eval_dataset: None,
            eval_m: 250,
            eval_per_id: 20,
            eval_seed: 424_242,
            eval_noise_sigma: 0.12,
            eval_pos_pairs: 20_000,
            eval_neg_pairs: 200_000,
            eval_far: vec![0.01, 0.001],
            eval_distractors: 500,
            eval_distractor_seed: 777,
            probe_size: 512,
            hist_bins: 100,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value for {key}: {value}")))
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p)).collect()
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p)).collect()
}

/// "iter:value,iter:value" pairs.
fn parse_schedule(key: &str, value: &str) -> Result<Vec<(u64, f64)>> {
    let v = value.trim();
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("expected iter:value in {key}: {p}")))?;
            Ok((parse_num(key, a)?, parse_num(key, b)?))
        })
        .collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "mode" => self.mode = RunMode::parse(v)?,
            "dataset" => self.dataset = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "teacher_checkpoint" => self.teacher_checkpoint = Some(PathBuf::from(v)),
            "mining_embeddings" => self.mining_embeddings = Some(PathBuf::from(v)),
            "input_dim" => self.input_dim = parse_num(key, v)?,
            "embed_dim" => self.embed_dim = parse_num(key, v)?,
            "teacher_hidden" => self.teacher_hidden = parse_usize_list(key, v)?,
            "student_hidden" => self.student_hidden = parse_usize_list(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "total_iters" => self.total_iters = parse_num(key, v)?,
            "lr_milestones" => self.lr_milestones = parse_schedule(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "k" => self.k = parse_num(key, v)?,
            "rad_variant" => {
                self.rad_variant = match v {
                    "absolute" => RadKind::Absolute,
                    "valid_only" => RadKind::ValidOnly,
                    "margin" => RadKind::Margin,
                    _ => return Err(Error::Config(format!("unknown rad_variant: {v}"))),
                }
            }
            "q" => self.q = parse_num(key, v)?,
            "alpha" => self.alpha = parse_num(key, v)?,
            "beta_schedule" => self.beta_schedule = parse_schedule(key, v)?,
            "arc_scale" => self.arc_scale = parse_num(key, v)?,
            "arc_margin" => self.arc_margin = parse_num(key, v)?,
            "gen_m" => self.gen_m = parse_num(key, v)?,
            "gen_per_id" => self.gen_per_id = parse_num(key, v)?,
            "gen_noise_sigma" => self.gen_noise_sigma = parse_num(key, v)?,
            "eval_dataset" => self.eval_dataset = Some(PathBuf::from(v)),
            "eval_m" => self.eval_m = parse_num(key, v)?,
            "eval_per_id" => self.eval_per_id = parse_num(key, v)?,
            "eval_seed" => self.eval_seed = parse_num(key, v)?,
            "eval_noise_sigma" => self.eval_noise_sigma = parse_num(key, v)?,
            "eval_pos_pairs" => self.eval_pos_pairs = parse_num(key, v)?,
            "eval_neg_pairs" => self.eval_neg_pairs = parse_num(key, v)?,
            "eval_far" => self.eval_far = parse_f64_list(key, v)?,
            "eval_distractors" => self.eval_distractors = parse_num(key, v)?,
            "eval_distractor_seed" => self.eval_distractor_seed = parse_num(key, v)?,
            "probe_size" => self.probe_size = parse_num(key, v)?,
            "hist_bins" => self.hist_bins = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key: {key}"))),
        }
        Ok(())
    }

    /// Parse a flat `key = value` text file. Blank lines and lines starting
    /// with `#` are ignored.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be >= 2".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if self.q < 0.0 {
            return Err(Error::Config("q must be >= 0".into()));
        }
        for w in self.lr_milestones.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("lr_milestones must be strictly increasing".into()));
            }
        }
        for w in self.beta_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("beta_schedule must be strictly increasing".into()));
            }
        }
        if self.beta_schedule.iter().any(|&(_, b)| b < 0.0) {
            return Err(Error::Config("beta values must be >= 0".into()));
        }
        Ok(())
    }

    pub fn teacher_spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec::new(input_dim, self.teacher_hidden.clone(), self.embed_dim)
    }

    pub fn student_spec(&self, input_dim: usize) -> MlpSpec {
        MlpSpec::new(input_dim, self.student_hidden.clone(), self.embed_dim)
    }

    fn variant(&self) -> RadVariant {
        RadVariant {
            kind: self.rad_variant,
            q: self.q,
        }
    }
}

/// Learning rate after dividing the initial rate by every milestone divisor
/// already reached (`iter >= milestone`).
pub fn lr_at(iter: u64, initial_lr: f64, milestones: &[(u64, f64)]) -> f64 {
    let mut lr = initial_lr;
    for &(at, divisor) in milestones {
        if iter >= at {
            lr /= divisor;
        }
    }
    lr
}

/// Loss weight in effect at `iter`: the last schedule entry whose start is
/// at or before `iter` (0 if none).
pub fn beta_at(schedule: &[(u64, f64)], iter: u64) -> f64 {
    let mut beta = 0.0;
    for &(at, b) in schedule {
        if iter >= at {
            beta = b;
        }
    }
    beta
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iter: u64,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_fcd: f64,
    pub loss_rad: f64,
    pub loss_ce: f64,
    pub n_valid: usize,
}

/// Per-iteration records plus an end-of-run summary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

/// Final loss values of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub iters: u64,
    pub final_loss_total: f64,
    pub final_loss_fcd: f64,
    pub final_loss_rad: f64,
    pub final_loss_ce: f64,
}

impl TrainLog {
    pub fn summary(&self) -> Option<TrainSummary> {
        self.records.last().map(|r| TrainSummary {
            iters: r.iter + 1,
            final_loss_total: r.loss_total,
            final_loss_fcd: r.loss_fcd,
            final_loss_rad: r.loss_rad,
            final_loss_ce: r.loss_ce,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,lr,loss_total,loss_fcd,loss_rad,loss_ce,n_valid\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.iter, r.lr, r.loss_total, r.loss_fcd, r.loss_rad, r.loss_ce, r.n_valid
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        binio::atomic_write(path, self.to_csv().as_bytes())
    }
}

/// Worker cap for read-only fan-out, from `COUPLEFACE_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("COUPLEFACE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Run the model over every sample, preserving order. Fans out over
/// contiguous chunks when `COUPLEFACE_THREADS` allows; the result is
/// identical for any worker count.
pub fn extract_features(model: &MlpModel, ds: &LabeledDataset) -> Result<EmbeddingMatrix> {
    if ds.input_dim() != model.spec.input_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("input_dim {}", model.spec.input_dim),
            actual: format!("{}", ds.input_dim()),
        });
    }
    let n = ds.len();
    let d = model.spec.embed_dim;
    let threads = worker_threads().min(n.max(1));
    let mut features = Matrix::zeros(n, d);
    if n > 0 {
        let chunk = n.div_ceil(threads);
        let results: Vec<Result<Matrix>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n)
                .step_by(chunk)
                .map(|start| {
                    let stop = (start + chunk).min(n);
                    let model = &model;
                    let inputs = &ds.inputs;
                    scope.spawn(move || {
                        let rows: Vec<usize> = (start..stop).collect();
                        let batch = inputs.gather_rows(&rows);
                        mlp_forward(model, &batch).map(|(e, _)| e)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut row = 0;
        for chunk_result in results {
            let emb = chunk_result?;
            for r in 0..emb.rows() {
                features.row_mut(row).copy_from_slice(emb.row(r));
                row += 1;
            }
        }
    }
    EmbeddingMatrix::new(features, ds.labels.clone(), ds.num_identities)
}

/// Deterministic stream of index batches, reshuffled every epoch.
struct EpochStream<'a> {
    ds: &'a LabeledDataset,
    batch_size: usize,
    epoch_rng: ChaCha8Rng,
    queue: VecDeque<Vec<usize>>,
}

impl<'a> EpochStream<'a> {
    fn new(ds: &'a LabeledDataset, batch_size: usize, seed: u64, stream: u64) -> Self {
        let mut rng = crate::vec_math::seeded_rng(seed);
        rng.set_stream(stream);
        Self {
            ds,
            batch_size,
            epoch_rng: rng,
            queue: VecDeque::new(),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            let epoch_seed: u64 = self.epoch_rng.random();
            self.queue = batch_iter(self.ds, self.batch_size, epoch_seed).into();
        }
        self.queue.pop_front().expect("nonempty epoch")
    }
}

/// Flat momentum buffer for the classification head.
struct HeadOptimizer {
    velocity: Vec<f64>,
}

impl HeadOptimizer {
    fn new(head: &ArcHead) -> Self {
        Self {
            velocity: vec![0.0; head.class_weights.data().len()],
        }
    }

    fn step(&mut self, head: &mut ArcHead, grads: &Matrix, lr: f64, momentum: f64, weight_decay: f64) {
        sgd_update(
            head.class_weights.data_mut(),
            grads.data(),
            &mut self.velocity,
            lr,
            momentum,
            weight_decay,
        );
    }
}

/// Train a model from scratch with the recognition loss under the config's
/// LR schedule. Used for the teacher (teacher architecture) and reusable
/// for scratch baselines.
pub fn train_teacher(cfg: &RunConfig, ds: &LabeledDataset) -> Result<(MlpModel, TrainLog)> {
    cfg.validate()?;
    let spec = cfg.teacher_spec(ds.input_dim());
    let mut model = mlp_init(&spec, derive_seed(cfg.seed, STREAM_TEACHER_INIT))?;
    let mut head = ArcHead::init(
        ds.num_identities,
        cfg.embed_dim,
        cfg.arc_scale,
        cfg.arc_margin,
        derive_seed(cfg.seed, STREAM_TEACHER_HEAD),
    )?;
    let mut stream = EpochStream::new(ds, cfg.batch_size, cfg.seed, STREAM_TEACHER_EPOCHS);
    let mut state = SgdState::new(&model);
    let mut head_opt = HeadOptimizer::new(&head);
    let mut log = TrainLog::default();
    for iter in 0..cfg.total_iters {
        let batch = stream.next_batch();
        let inputs = ds.inputs.gather_rows(&batch);
        let labels: Vec<u32> = batch.iter().map(|&i| ds.labels[i]).collect();
        let (emb, cache) = mlp_forward(&model, &inputs)?;
        let (ce, grad_emb, grad_head) = arcface_loss(&emb, &labels, &head)?;
        if !ce.is_finite() || !grad_emb.is_finite() {
            return Err(Error::NonFiniteLoss { iter });
        }
        let grads = mlp_backward(&model, &cache, &grad_emb)?;
        let lr = lr_at(iter, cfg.lr, &cfg.lr_milestones);
        sgd_step(&mut model, &grads, &mut state, lr, cfg.momentum, cfg.weight_decay);
        head_opt.step(&mut head, &grad_head, lr, cfg.momentum, cfg.weight_decay);
        log.records.push(TrainRecord {
            iter,
            lr,
            loss_total: ce,
            loss_fcd: 0.0,
            loss_rad: 0.0,
            loss_ce: ce,
            n_valid: 0,
        });
    }
    Ok((model, log))
}

/// Everything a distillation run produces: the trained student, the log,
/// and the mining artifacts in their final state.
#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: MlpModel,
    pub log: TrainLog,
    pub bank: FeatureBank,
    pub sets: InformativeSets,
    pub teacher_features: EmbeddingMatrix,
}

/// Distill the frozen teacher into a fresh student.
///
/// Preamble: extract all teacher features, build identity prototypes and
/// the informative sets (from `mining_embeddings` when configured), and
/// initialize the feature bank. Loop: per batch, look up teacher features,
/// forward the student, refresh the bank, gather negatives, combine the
/// configured losses and apply SGD.
pub fn distill(cfg: &RunConfig, teacher: &MlpModel, ds: &LabeledDataset) -> Result<DistillOutcome> {
    cfg.validate()?;
    if teacher.spec.embed_dim != cfg.embed_dim {
        return Err(Error::DimMismatch {
            teacher: teacher.spec.embed_dim,
            student: cfg.embed_dim,
        });
    }
    let teacher_features = extract_features(teacher, ds)?;

    // Mining features default to the teacher's own; a different embedding
    // file may be supplied to reproduce mining-model swaps.
    let sets = if cfg.mode == RunMode::AblationD {
        random_informative_sets(
            ds.num_identities,
            cfg.k,
            derive_seed(cfg.seed, STREAM_RANDOM_SETS),
        )?
    } else {
        let protos = match &cfg.mining_embeddings {
            Some(path) => {
                let mined = read_embeddings(path)?;
                if mined.num_identities != ds.num_identities || mined.labels != ds.labels {
                    return Err(Error::Config(
                        "mining_embeddings must cover the same samples and identities as the dataset"
                            .into(),
                    ));
                }
                compute_prototypes(&mined)?
            }
            None => compute_prototypes(&teacher_features)?,
        };
        build_informative_sets(&protos, cfg.k)?
    };
    let mut bank = bank_init(&teacher_features, derive_seed(cfg.seed, STREAM_BANK_INIT))?;

    let spec = cfg.student_spec(ds.input_dim());
    let mut student = mlp_init(&spec, derive_seed(cfg.seed, STREAM_STUDENT_INIT))?;
    let mut head = ArcHead::init(
        ds.num_identities,
        cfg.embed_dim,
        cfg.arc_scale,
        cfg.arc_margin,
        derive_seed(cfg.seed, STREAM_STUDENT_HEAD),
    )?;
    let mut state = SgdState::new(&student);
    let mut head_opt = HeadOptimizer::new(&head);
    let mut stream = EpochStream::new(ds, cfg.batch_size, cfg.seed, STREAM_EPOCHS);
    let variant = match cfg.mode {
        RunMode::AblationA => RadVariant::absolute(),
        RunMode::AblationB => RadVariant::valid_only(),
        _ => cfg.variant(),
    };
    // A positive beta entry marks the schedule restart point (second phase).
    let beta_switch = cfg
        .beta_schedule
        .iter()
        .find(|&&(_, b)| b > 0.0)
        .map(|&(at, _)| at)
        .filter(|&at| at > 0 && cfg.mode == RunMode::CouplefacePlus);

    let mut log = TrainLog::default();
    for iter in 0..cfg.total_iters {
        let batch = stream.next_batch();
        let inputs = ds.inputs.gather_rows(&batch);
        let labels: Vec<u32> = batch.iter().map(|&i| ds.labels[i]).collect();
        let batch_teacher = teacher_features.features.gather_rows(&batch);
        let (emb, cache) = mlp_forward(&student, &inputs)?;

        bank_update(&mut bank, &batch_teacher, &labels)?;

        let n = emb.rows();
        let d = emb.cols();
        let mut total_grad = Matrix::zeros(n, d);
        let mut loss_fcd = 0.0;
        let mut loss_rad = 0.0;
        let mut loss_ce = 0.0;
        let mut n_valid = 0;

        if cfg.mode != RunMode::ArcfaceOnly {
            let fcd = fcd_loss(&emb, &batch_teacher)?;
            loss_fcd = fcd.value;
            for (g, f) in total_grad.data_mut().iter_mut().zip(fcd.grad_student.data()) {
                *g += f;
            }
        }

        let rad = match cfg.mode {
            RunMode::Coupleface
            | RunMode::CouplefacePlus
            | RunMode::AblationA
            | RunMode::AblationB
            | RunMode::AblationD => {
                let negatives: Vec<Matrix> = labels
                    .iter()
                    .map(|&y| gather_negatives(&bank, &sets, y))
                    .collect::<Result<_>>()?;
                Some(rad_loss(&variant, &emb, &batch_teacher, &negatives)?)
            }
            RunMode::AblationC => Some(rad_loss_inbatch(&variant, &emb, &batch_teacher, &labels)?),
            RunMode::AblationE => {
                let negatives: Vec<Matrix> = (0..n)
                    .map(|i| {
                        let rows: Vec<usize> = (0..n)
                            .filter(|&j| j != i && labels[j] != labels[i])
                            .collect();
                        batch_teacher.gather_rows(&rows)
                    })
                    .collect();
                Some(rad_loss(&variant, &emb, &batch_teacher, &negatives)?)
            }
            RunMode::ArcfaceOnly | RunMode::FcdOnly => None,
        };
        if let Some(rad) = rad {
            loss_rad = rad.value;
            n_valid = rad.valid_count;
            for (g, r) in total_grad.data_mut().iter_mut().zip(rad.grad_student.data()) {
                *g += cfg.alpha * r;
            }
        }

        let beta = if cfg.mode == RunMode::ArcfaceOnly {
            1.0
        } else {
            beta_at(&cfg.beta_schedule, iter)
        };
        if beta != 0.0 {
            let (ce, grad_ce, grad_head) = arcface_loss(&emb, &labels, &head)?;
            loss_ce = ce;
            for (g, c) in total_grad.data_mut().iter_mut().zip(grad_ce.data()) {
                *g += beta * c;
            }
            let lr = effective_lr(cfg, beta_switch, iter);
            head_opt.step(&mut head, &grad_head, lr, cfg.momentum, cfg.weight_decay);
        }

        let alpha_term = if cfg.mode == RunMode::ArcfaceOnly || cfg.mode == RunMode::FcdOnly {
            0.0
        } else {
            cfg.alpha * loss_rad
        };
        let loss_total = loss_fcd + alpha_term + beta * loss_ce;
        if !loss_total.is_finite() || !total_grad.is_finite() {
            return Err(Error::NonFiniteLoss { iter });
        }

        let grads = mlp_backward(&student, &cache, &total_grad)?;
        let lr = effective_lr(cfg, beta_switch, iter);
        sgd_step(&mut student, &grads, &mut state, lr, cfg.momentum, cfg.weight_decay);

        log.records.push(TrainRecord {
            iter,
            lr,
            loss_total,
            loss_fcd,
            loss_rad,
            loss_ce,
            n_valid,
        });
    }
    Ok(DistillOutcome {
        student,
        log,
        bank,
        sets,
        teacher_features,
    })
}

/// LR under the milestone schedule; the second phase of a two-phase run
/// restarts the schedule at the beta switch point.
fn effective_lr(cfg: &RunConfig, beta_switch: Option<u64>, iter: u64) -> f64 {
    let effective_iter = match beta_switch {
        Some(switch) if iter >= switch => iter - switch,
        _ => iter,
    };
    lr_at(effective_iter, cfg.lr, &cfg.lr_milestones)
}
