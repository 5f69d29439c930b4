//! Run configuration and the end-to-end drivers behind the command line:
//! pretraining with any method, finetuning, evaluation, benchmarking,
//! parameter counts and representation / attention exports.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    supervised_objective, CtsObjective, MbmObjective, MsdpObjective, NbpObjective, MBM1_RATIO,
    MBM2_RATIO, MSDP_DEFAULT_VOCAB,
};
use crate::config::{parse_kv, KvReader};
use crate::data::{task_names, SampleWindows, UbsSample, WindowPlan, SECONDS_PER_DAY};
use crate::encoder::pool_sequence;
use crate::error::{Error, Result};
use crate::finetune::{finetune, representations, FinetuneMode};
use crate::model::{ModelConfig, UbsModel};
use crate::nn::ParamSet;
use crate::pretrain::{Adam, AdamConfig, BybObjective, CeForm, LossConfig, LossKind, PretrainConfig, SequenceMode};
use crate::seqmodel::SeqModelConfig;
use crate::tensor::{Tensor, CHECKPOINT_VERSION};
use crate::train::{train, train_step, MetricsCsv, Objective, StepRecord, TrainOptions};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.bybt";
pub const BENCH_FILE: &str = "bench.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// Pretraining method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Byb,
    Nbp,
    Mbm1,
    Mbm2,
    Cts,
    Msdp,
    Supervised,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Byb,
        Method::Nbp,
        Method::Mbm1,
        Method::Mbm2,
        Method::Cts,
        Method::Msdp,
        Method::Supervised,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Byb => "byb",
            Method::Nbp => "nbp",
            Method::Mbm1 => "mbm1",
            Method::Mbm2 => "mbm2",
            Method::Cts => "cts",
            Method::Msdp => "msdp",
            Method::Supervised => "supervised",
        }
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method {:?}; expected one of {}", s, names.join(", ")))
            })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(Self::CrossEntropy),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::Config(format!("loss must be cross_entropy or mse, got {:?}", s))),
        }
    }
}

impl FromStr for CeForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distillation" => Ok(Self::Distillation),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::Config(format!("ce_form must be distillation or literal, got {:?}", s))),
        }
    }
}

/// Every setting of a run as one flat record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub pool_window_seconds: u64,
    pub prediction_window_seconds: u64,
    pub observation_seconds: u64,

    /// Named sequence-model size; excludes the explicit dimensions below.
    pub preset: Option<String>,
    pub d_model: Option<usize>,
    pub ff_dim: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub max_positions: usize,
    pub max_id: u32,
    pub m_max: usize,
    /// Amplitude of the fixed sinusoidal position encodings.
    pub position_scale: f64,

    pub loss: LossKind,
    pub temperature: f64,
    pub ce_form: CeForm,
    pub use_predictor: bool,
    pub use_ema: bool,
    pub ema_momentum: f64,

    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub seed: u64,

    pub mode: FinetuneMode,
    pub task: Option<String>,
    pub num_classes: Option<usize>,

    pub mask_ratio: Option<f64>,
    pub msdp_vocab: usize,

    pub unpooled_max_len: usize,
    pub warmup_steps: usize,
    pub bench_steps: usize,
    /// Samples used by the export commands.
    pub num_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            method: Method::Byb,
            train_path: None,
            test_path: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
            pool_window_seconds: SECONDS_PER_DAY,
            prediction_window_seconds: SECONDS_PER_DAY,
            observation_seconds: 60 * SECONDS_PER_DAY,
            preset: None,
            d_model: None,
            ff_dim: None,
            layers: None,
            heads: None,
            max_positions: m.seq.max_positions,
            max_id: m.max_id,
            m_max: m.m_max,
            position_scale: m.seq.position_scale,
            loss: LossKind::CrossEntropy,
            temperature: 0.1,
            ce_form: CeForm::Distillation,
            use_predictor: true,
            use_ema: true,
            ema_momentum: m.ema_momentum,
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 2,
            batch_size: 64,
            max_steps: None,
            seed: 0,
            mode: FinetuneMode::Freeze,
            task: None,
            num_classes: None,
            mask_ratio: None,
            msdp_vocab: MSDP_DEFAULT_VOCAB,
            unpooled_max_len: 2048,
            warmup_steps: 5,
            bench_steps: 10,
            num_samples: 5000,
        }
    }
}

fn set_path(kv: &KvReader<'_>, key: &str, slot: &mut Option<PathBuf>) -> Result<()> {
    if let Some(v) = kv.get::<String>(key)? {
        *slot = Some(PathBuf::from(v));
    }
    Ok(())
}

impl RunConfig {
    /// Reads a `key = value` file, or a manifest JSON written by an earlier
    /// run (its `config` object).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            let manifest: Manifest = serde_json::from_str(text)?;
            return Ok(manifest.config);
        }
        let map = parse_kv(text)?;
        let mut cfg = Self::default();
        cfg.apply_map(&map)?;
        Ok(cfg)
    }

    /// Applies `key = value` overrides; unknown keys are an error.
    pub fn apply_map(&mut self, map: &std::collections::BTreeMap<String, String>) -> Result<()> {
        let kv = KvReader::new(map);
        self.apply_kv(&kv)?;
        let unknown = kv.unknown_keys();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown setting(s): {}", unknown.join(", "))));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvReader<'_>) -> Result<()> {
        kv.set("method", &mut self.method)?;
        set_path(kv, "train_path", &mut self.train_path)?;
        set_path(kv, "test_path", &mut self.test_path)?;
        set_path(kv, "checkpoint", &mut self.checkpoint)?;
        if let Some(v) = kv.get::<String>("out_dir")? {
            self.out_dir = PathBuf::from(v);
        }
        kv.set("pool_window_seconds", &mut self.pool_window_seconds)?;
        kv.set("prediction_window_seconds", &mut self.prediction_window_seconds)?;
        kv.set("observation_seconds", &mut self.observation_seconds)?;
        if let Some(days) = kv.get::<u64>("observation_days")? {
            self.observation_seconds = days * SECONDS_PER_DAY;
        }
        kv.set_opt("preset", &mut self.preset)?;
        kv.set_opt("d_model", &mut self.d_model)?;
        kv.set_opt("ff_dim", &mut self.ff_dim)?;
        kv.set_opt("layers", &mut self.layers)?;
        kv.set_opt("heads", &mut self.heads)?;
        kv.set("max_positions", &mut self.max_positions)?;
        kv.set("max_id", &mut self.max_id)?;
        kv.set("m_max", &mut self.m_max)?;
        kv.set("position_scale", &mut self.position_scale)?;
        kv.set("loss", &mut self.loss)?;
        kv.set("temperature", &mut self.temperature)?;
        kv.set("ce_form", &mut self.ce_form)?;
        kv.set("use_predictor", &mut self.use_predictor)?;
        kv.set("use_ema", &mut self.use_ema)?;
        kv.set("ema_momentum", &mut self.ema_momentum)?;
        kv.set("lr", &mut self.lr)?;
        kv.set("weight_decay", &mut self.weight_decay)?;
        kv.set("epochs", &mut self.epochs)?;
        kv.set("batch_size", &mut self.batch_size)?;
        kv.set_opt("max_steps", &mut self.max_steps)?;
        kv.set("seed", &mut self.seed)?;
        kv.set("mode", &mut self.mode)?;
        kv.set_opt("task", &mut self.task)?;
        kv.set_opt("num_classes", &mut self.num_classes)?;
        kv.set_opt("mask_ratio", &mut self.mask_ratio)?;
        kv.set("msdp_vocab", &mut self.msdp_vocab)?;
        kv.set("unpooled_max_len", &mut self.unpooled_max_len)?;
        kv.set("warmup_steps", &mut self.warmup_steps)?;
        kv.set("bench_steps", &mut self.bench_steps)?;
        kv.set("num_samples", &mut self.num_samples)?;
        Ok(())
    }

    pub fn plan(&self) -> Result<WindowPlan> {
        WindowPlan::new(
            self.pool_window_seconds,
            self.prediction_window_seconds,
            self.observation_seconds,
        )
    }

    pub fn seq_config(&self) -> Result<SeqModelConfig> {
        let explicit = [self.d_model, self.ff_dim, self.layers, self.heads];
        let mut seq = match &self.preset {
            Some(name) => {
                if explicit.iter().any(Option::is_some) {
                    return Err(Error::Config(
                        "preset and explicit d_model/ff_dim/layers/heads are mutually exclusive".into(),
                    ));
                }
                SeqModelConfig::preset(name)?
            }
            None => {
                let mut s = SeqModelConfig::default();
                s.d_model = self.d_model.unwrap_or(s.d_model);
                s.ff_dim = self.ff_dim.unwrap_or(s.ff_dim);
                s.num_layers = self.layers.unwrap_or(s.num_layers);
                s.num_heads = self.heads.unwrap_or(s.num_heads);
                s
            }
        };
        seq.max_positions = self.max_positions;
        seq.position_scale = self.position_scale;
        seq.validate()?;
        Ok(seq)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let c = ModelConfig {
            seq: self.seq_config()?,
            max_id: self.max_id,
            m_max: self.m_max,
            ema_momentum: self.ema_momentum,
            ..Default::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            temperature: self.temperature,
            ce_form: self.ce_form,
        }
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        Ok(PretrainConfig {
            plan: self.plan()?,
            loss: self.loss_config(),
            use_predictor: self.use_predictor,
            use_ema: self.use_ema,
            mode: SequenceMode::Pooled,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..Default::default()
            },
            max_steps: self.max_steps,
        }
    }

    /// Checks everything that does not need data: ranges, exclusivity, and
    /// that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        self.plan()?;
        self.model_config()?;
        self.loss_config().validate()?;
        self.train_options().validate()?;
        if let Some(r) = self.mask_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("mask_ratio must be in (0, 1], got {}", r)));
            }
        }
        if self.msdp_vocab == 0 || self.unpooled_max_len == 0 {
            return Err(Error::Config("msdp_vocab and unpooled_max_len must be positive".into()));
        }
        for p in [&self.train_path, &self.test_path, &self.checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn require_train(&self) -> Result<&Path> {
        self.train_path
            .as_deref()
            .ok_or_else(|| Error::Config("a training dataset path is required".into()))
    }

    pub fn require_test(&self) -> Result<&Path> {
        self.test_path
            .as_deref()
            .ok_or_else(|| Error::Config("a test dataset path is required".into()))
    }

    pub fn require_checkpoint(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("a checkpoint path is required".into()))
    }

    pub fn require_task(&self) -> Result<&str> {
        self.task
            .as_deref()
            .ok_or_else(|| Error::Config("a task name is required".into()))
    }
}

/// Reproduction record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub crate_version: String,
    pub checkpoint_format: u32,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            seed: config.seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Number of classes of `task`: configured, or one more than the largest
/// label seen.
pub fn infer_classes(dataset: &[UbsSample], task: &str, configured: Option<usize>) -> Result<usize> {
    if let Some(c) = configured {
        return Ok(c);
    }
    let max = dataset
        .iter()
        .filter_map(|s| s.labels.get(task))
        .max()
        .ok_or_else(|| Error::Config(format!("no sample carries a label for task {}", task)))?;
    Ok((max + 1).max(2))
}

/// Fresh model plus the objective for `cfg.method`, with any
/// method-specific tensors attached.
pub fn prepare_pretraining(cfg: &RunConfig, dataset: &[UbsSample]) -> Result<(UbsModel, Box<dyn Objective>)> {
    let mut model = UbsModel::init(cfg.model_config()?, cfg.seed)?;
    let plan = cfg.plan()?;
    let aux_seed = cfg.seed.wrapping_add(1);
    let objective: Box<dyn Objective> = match cfg.method {
        Method::Byb => Box::new(BybObjective::new(cfg.pretrain_config()?)?),
        Method::Nbp => {
            NbpObjective::init_aux(&mut model, aux_seed);
            Box::new(NbpObjective { plan })
        }
        Method::Mbm1 | Method::Mbm2 => {
            let default = if cfg.method == Method::Mbm1 { MBM1_RATIO } else { MBM2_RATIO };
            MbmObjective::init_aux(&mut model, aux_seed);
            Box::new(MbmObjective::new(plan, cfg.mask_ratio.unwrap_or(default), cfg.seed)?)
        }
        Method::Cts => Box::new(CtsObjective::new(plan, cfg.seed)),
        Method::Msdp => {
            let obj = MsdpObjective::new(plan, dataset, cfg.msdp_vocab, cfg.max_id)?;
            obj.init_aux(&mut model, aux_seed);
            Box::new(obj)
        }
        Method::Supervised => {
            let task = cfg.require_task()?;
            let classes = infer_classes(dataset, task, cfg.num_classes)?;
            model.attach_head(task, classes, aux_seed)?;
            Box::new(supervised_objective(task, plan))
        }
    };
    Ok((model, objective))
}

fn metrics_writer(out_dir: Option<&Path>) -> Result<Option<MetricsCsv<BufWriter<File>>>> {
    match out_dir {
        None => Ok(None),
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let f = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
            Ok(Some(MetricsCsv::new(f)?))
        }
    }
}

/// Trains a fresh model with `cfg.method`. With `out_dir`, streams
/// `metrics.csv` and writes the checkpoint and manifest there.
pub fn pretrain(cfg: &RunConfig, dataset: &[UbsSample], out_dir: Option<&Path>) -> Result<(UbsModel, Vec<StepRecord>)> {
    cfg.validate()?;
    let (mut model, mut objective) = prepare_pretraining(cfg, dataset)?;
    let mut csv = metrics_writer(out_dir)?;
    let records = train(&mut model, dataset, objective.as_mut(), &cfg.train_options(), |r, _| {
        if let Some(c) = csv.as_mut() {
            c.record(r)?;
        }
        Ok(())
    })?;
    if let Some(dir) = out_dir {
        model.save(&dir.join(CHECKPOINT_FILE))?;
        Manifest::new("pretrain", cfg).write(dir)?;
    }
    Ok((model, records))
}

/// Finetunes `model` on `cfg.task` in `cfg.mode`; one epoch unless the
/// config says otherwise.
pub fn finetune_run(
    cfg: &RunConfig,
    model: &mut UbsModel,
    dataset: &[UbsSample],
    out_dir: Option<&Path>,
) -> Result<Vec<StepRecord>> {
    let task = cfg.require_task()?.to_string();
    let classes = infer_classes(dataset, &task, cfg.num_classes)?;
    let mut csv = metrics_writer(out_dir)?;
    let records = finetune(
        model,
        dataset,
        &task,
        classes,
        cfg.mode,
        &cfg.plan()?,
        &cfg.train_options(),
        |r, _| {
            if let Some(c) = csv.as_mut() {
                c.record(r)?;
            }
            Ok(())
        },
    )?;
    if let Some(dir) = out_dir {
        model.save(&dir.join(CHECKPOINT_FILE))?;
        Manifest::new("finetune", cfg).write(dir)?;
    }
    Ok(records)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub samples_per_second: f64,
    pub epoch_wall_seconds: f64,
    /// Peak live tensor bytes of one training step.
    pub peak_resident_bytes: usize,
    pub steps_timed: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub pooled: VariantStats,
    pub unpooled: VariantStats,
    pub samples_per_second: f64,
    pub epoch_wall_seconds: f64,
    pub peak_resident_bytes: usize,
    pub pooled_vs_unpooled_speedup: f64,
    pub batch_size: usize,
    pub unpooled_max_len: usize,
}

fn bench_variant(
    model: &UbsModel,
    dataset: &[UbsSample],
    pcfg: PretrainConfig,
    cfg: &RunConfig,
) -> Result<VariantStats> {
    let mut model = model.clone();
    let mut adam = Adam::new(cfg.train_options().adam);
    let mut obj = BybObjective::new(pcfg)?;
    let mut batches = dataset.chunks_exact(cfg.batch_size);
    let mut peak = 0;
    for _ in 0..cfg.warmup_steps {
        let batch: Vec<&UbsSample> = batches.next().expect("size checked").iter().collect();
        peak = peak.max(train_step(&mut model, &mut adam, &mut obj, &batch)?.tape_bytes);
    }
    let mut elapsed = 0.0;
    let mut samples = 0;
    for _ in 0..cfg.bench_steps {
        let batch: Vec<&UbsSample> = batches.next().expect("size checked").iter().collect();
        // time the step only; batch assembly above is outside the clock
        let start = Instant::now();
        let out = train_step(&mut model, &mut adam, &mut obj, &batch)?;
        elapsed += start.elapsed().as_secs_f64();
        samples += batch.len();
        peak = peak.max(out.tape_bytes);
    }
    let sps = samples as f64 / elapsed.max(1e-12);
    Ok(VariantStats {
        samples_per_second: sps,
        epoch_wall_seconds: dataset.len() as f64 / sps,
        peak_resident_bytes: peak,
        steps_timed: cfg.bench_steps,
    })
}

/// Steady-state pretraining throughput of the pooled model against the same
/// parameters run over raw behaviors (most recent `unpooled_max_len`).
pub fn bench(cfg: &RunConfig, dataset: &[UbsSample]) -> Result<BenchReport> {
    cfg.validate()?;
    if cfg.warmup_steps < 5 {
        return Err(Error::Config(format!(
            "at least 5 warmup steps are required, got {}",
            cfg.warmup_steps
        )));
    }
    if cfg.bench_steps == 0 {
        return Err(Error::Config("bench_steps must be positive".into()));
    }
    let needed = cfg.batch_size * (cfg.warmup_steps + cfg.bench_steps);
    if dataset.len() < needed {
        return Err(Error::Config(format!(
            "dataset of {} samples is too small for {} warmup + {} timed steps of batch {}",
            dataset.len(),
            cfg.warmup_steps,
            cfg.bench_steps,
            cfg.batch_size
        )));
    }
    let mut mc = cfg.model_config()?;
    mc.seq.max_positions = mc.seq.max_positions.max(cfg.unpooled_max_len);
    let model = UbsModel::init(mc, cfg.seed)?;
    let base = cfg.pretrain_config()?;
    let pooled = bench_variant(&model, dataset, base, cfg)?;
    let unpooled = bench_variant(
        &model,
        dataset,
        PretrainConfig {
            mode: SequenceMode::Unpooled {
                max_len: cfg.unpooled_max_len,
            },
            ..base
        },
        cfg,
    )?;
    Ok(BenchReport {
        pooled,
        unpooled,
        samples_per_second: pooled.samples_per_second,
        epoch_wall_seconds: pooled.epoch_wall_seconds,
        peak_resident_bytes: pooled.peak_resident_bytes,
        pooled_vs_unpooled_speedup: pooled.samples_per_second / unpooled.samples_per_second,
        batch_size: cfg.batch_size,
        unpooled_max_len: cfg.unpooled_max_len,
    })
}

// ---------------------------------------------------------------------------

/// Parameter counts by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// The sequence model alone (transformer layers).
    pub sequence_model: usize,
    pub encoder: usize,
    pub predictor: usize,
    pub total: usize,
}

pub fn count_params(config: &ModelConfig) -> Result<ParamCounts> {
    let model = UbsModel::init(*config, 0)?;
    let sequence_model = config.seq.count_params();
    debug_assert_eq!(sequence_model, model.seq.num_params());
    let encoder = model.encoders.student.num_params();
    let predictor = model.predictor.num_params();
    Ok(ParamCounts {
        sequence_model,
        encoder,
        predictor,
        total: sequence_model + encoder + predictor,
    })
}

/// Dataset indices of `min(n, len)` samples drawn without replacement,
/// in dataset order.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n > len {
        log::warn!("{} samples requested from a dataset of {}; clipped", n, len);
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n.min(len));
    idx.sort_unstable();
    idx
}

/// CSV of `E` per sampled user: `user_id, e0..e{d-1}`, then one column per
/// task label (empty when absent).
pub fn export_embeddings(
    model: &UbsModel,
    dataset: &[UbsSample],
    plan: &WindowPlan,
    n: usize,
    seed: u64,
) -> Result<String> {
    let picked: Vec<UbsSample> = sample_indices(dataset.len(), n, seed)
        .into_iter()
        .map(|i| dataset[i].clone())
        .collect();
    let tasks = task_names(&picked);
    let (e, kept) = representations(model, &picked, plan)?;
    let d = model.config.d_model();
    let mut out = String::from("user_id");
    for c in 0..d {
        let _ = write!(out, ",e{}", c);
    }
    for t in &tasks {
        let _ = write!(out, ",{}", t);
    }
    out.push('\n');
    for (row, &i) in kept.iter().enumerate() {
        let s = &picked[i];
        out.push_str(&s.user_id);
        for v in e.row(row) {
            let _ = write!(out, ",{:e}", v);
        }
        for t in &tasks {
            out.push(',');
            if let Some(l) = s.labels.get(t) {
                let _ = write!(out, "{}", l);
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Per-layer attention maps averaged over sampled users (those with at least
/// one observed day).
pub fn attention_maps(
    model: &UbsModel,
    dataset: &[UbsSample],
    plan: &WindowPlan,
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    let mut pooled = Vec::new();
    for i in sample_indices(dataset.len(), n, seed) {
        let w = SampleWindows::build(&dataset[i], plan, model.config.max_id, model.config.m_max)?;
        if w.valid_positions().iter().any(|&v| v) {
            pooled.push(pool_sequence(&model.encoders.student, &w)?);
        }
    }
    model.seq.attention_maps(&pooled)
}

pub fn matrix_csv(m: &Tensor, rows: std::ops::Range<usize>) -> String {
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = m.row(r).iter().map(|v| format!("{:e}", v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Rows `K-10..K` of a `[K, K]` map (all rows when `K < 10`).
pub fn last_rows(k: usize, count: usize) -> std::ops::Range<usize> {
    k.saturating_sub(count)..k
}

/// Writes `attn_layer<i>.csv` (full map) and `attn_layer<i>_last10.csv`
/// (the last ten query positions) for every layer; returns the file names.
pub fn write_attention(maps: &[Tensor], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        let k = m.shape()[0];
        let full = dir.join(format!("attn_layer{}.csv", i));
        fs::write(&full, matrix_csv(m, 0..k))?;
        let tail = dir.join(format!("attn_layer{}_last10.csv", i));
        fs::write(&tail, matrix_csv(m, last_rows(k, 10)))?;
        files.push(full);
        files.push(tail);
    }
    Ok(files)
}

/// Mean attention weight the last query position puts on keys `lag` steps
/// back, over `lags`.
pub fn last_row_lag_weight(map: &Tensor, lags: &[usize]) -> f64 {
    let k = map.shape()[0];
    let row = map.row(k - 1);
    let picked: Vec<f64> = lags.iter().filter(|&&l| l < k).map(|&l| row[k - 1 - l]).collect();
    picked.iter().sum::<f64>() / picked.len().max(1) as f64
}
