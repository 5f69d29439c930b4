use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ubs_core::config::{parse_kv, KvReader};
use ubs_core::data::{generate_synthetic, read_jsonl, write_jsonl, GeneratorConfig, UbsSample};
use ubs_core::finetune::{evaluate, EvalReport};
use ubs_core::model::UbsModel;
use ubs_core::run::{self, Manifest, RunConfig};
use ubs_core::tensor::CHECKPOINT_VERSION;
use ubs_core::Error;

#[derive(Parser)]
#[command(name = "ubs", version, about = "Behavior-sequence pretraining toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSON lines.
    Generate(GenerateArgs),
    /// Pretrain a model (BYB or a baseline method).
    Pretrain(RunArgs),
    /// Train a task head on a checkpoint (freeze or unfreeze).
    Finetune(RunArgs),
    /// Score a finetuned checkpoint on a test set.
    Eval(RunArgs),
    /// Pooled vs unpooled pretraining throughput.
    Bench(RunArgs),
    /// Dump per-layer attention maps.
    Attn(RunArgs),
    /// Export sequence representations.
    ExportEmb(RunArgs),
    /// Parameter counts of a model configuration.
    CountParams(RunArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// `key = value` file of generator settings (or a generate manifest).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file; defaults to `<out-dir>/dataset.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    num_users: Option<usize>,
    #[arg(long)]
    num_days: Option<usize>,
    #[arg(long)]
    horizon_days: Option<usize>,
    #[arg(long)]
    avg_events_per_day: Option<f64>,
    #[arg(long)]
    vocab_size: Option<u32>,
    #[arg(long)]
    num_categories: Option<usize>,
    #[arg(long)]
    ids_min: Option<usize>,
    #[arg(long)]
    ids_max: Option<usize>,
    #[arg(long)]
    periodicity: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` settings file, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any setting as `key=value`; applied after the file and before flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// byb, nbp, mbm1, mbm2, cts, msdp or supervised.
    #[arg(long)]
    method: Option<String>,
    /// Training (or input) dataset, JSON lines.
    #[arg(long, visible_alias = "data")]
    train: Option<String>,
    #[arg(long)]
    test: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    task: Option<String>,
    /// freeze or unfreeze.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    d_model: Option<String>,
    #[arg(long)]
    ff_dim: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    observation_days: Option<String>,
    #[arg(long)]
    pool_window_seconds: Option<String>,
    #[arg(long)]
    prediction_window_seconds: Option<String>,
    /// cross_entropy or mse.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    /// distillation or literal.
    #[arg(long)]
    ce_form: Option<String>,
    /// Feed the sequence output straight into the loss.
    #[arg(long)]
    no_predictor: bool,
    /// Copy the student into the teacher after every step.
    #[arg(long)]
    no_ema: bool,
    #[arg(long)]
    ema_momentum: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    num_classes: Option<String>,
    #[arg(long)]
    mask_ratio: Option<String>,
    #[arg(long)]
    unpooled_max_len: Option<String>,
    #[arg(long)]
    warmup_steps: Option<String>,
    #[arg(long)]
    bench_steps: Option<String>,
    /// Users sampled by attn and export-emb.
    #[arg(long)]
    num_samples: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Result<BTreeMap<String, String>, CliError> {
        let mut map = BTreeMap::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {:?}", s)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let flags = [
            ("out_dir", &self.out_dir),
            ("method", &self.method),
            ("train_path", &self.train),
            ("test_path", &self.test),
            ("checkpoint", &self.checkpoint),
            ("task", &self.task),
            ("mode", &self.mode),
            ("preset", &self.preset),
            ("d_model", &self.d_model),
            ("ff_dim", &self.ff_dim),
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("observation_days", &self.observation_days),
            ("pool_window_seconds", &self.pool_window_seconds),
            ("prediction_window_seconds", &self.prediction_window_seconds),
            ("loss", &self.loss),
            ("temperature", &self.temperature),
            ("ce_form", &self.ce_form),
            ("ema_momentum", &self.ema_momentum),
            ("lr", &self.lr),
            ("weight_decay", &self.weight_decay),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("max_steps", &self.max_steps),
            ("seed", &self.seed),
            ("num_classes", &self.num_classes),
            ("mask_ratio", &self.mask_ratio),
            ("unpooled_max_len", &self.unpooled_max_len),
            ("warmup_steps", &self.warmup_steps),
            ("bench_steps", &self.bench_steps),
            ("num_samples", &self.num_samples),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                map.insert(k.to_string(), v.clone());
            }
        }
        if self.no_predictor {
            map.insert("use_predictor".into(), "false".into());
        }
        if self.no_ema {
            map.insert("use_ema".into(), "false".into());
        }
        Ok(map)
    }

    /// File settings, then `--set`, then flags; validated.
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).map_err(usage)?,
            None => RunConfig::default(),
        };
        cfg.apply_map(&self.overrides()?).map_err(usage)?;
        cfg.validate().map_err(usage)?;
        Ok(cfg)
    }
}

enum CliError {
    /// Bad flags, settings or combinations: exit status 2.
    Usage(String),
    /// Failure while running: exit status 1.
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn load_dataset(path: &Path) -> Result<Vec<UbsSample>, CliError> {
    let data = read_jsonl(path)?;
    if data.is_empty() {
        return Err(CliError::Usage(format!("dataset {} is empty", path.display())));
    }
    Ok(data)
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(Error::from)?;
    Ok(path)
}

fn generator_config(args: &GenerateArgs) -> Result<GeneratorConfig, CliError> {
    let mut cfg = GeneratorConfig::default();
    if let Some(p) = &args.config {
        let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {}", p.display(), e)))?;
        if text.trim_start().starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(e.to_string()))?;
            cfg = serde_json::from_value(v["generator"].clone()).map_err(|e| CliError::Usage(e.to_string()))?;
        } else {
            let map = parse_kv(&text).map_err(usage)?;
            let kv = KvReader::new(&map);
            cfg.apply_kv(&kv).map_err(usage)?;
            let unknown = kv.unknown_keys();
            if !unknown.is_empty() {
                return Err(CliError::Usage(format!("unknown setting(s): {}", unknown.join(", "))));
            }
        }
    }
    macro_rules! flag {
        ($field:ident, $arg:ident) => {
            if let Some(v) = args.$arg {
                cfg.$field = v;
            }
        };
    }
    flag!(num_users, num_users);
    flag!(num_days, num_days);
    flag!(horizon_days, horizon_days);
    flag!(avg_events_per_day, avg_events_per_day);
    flag!(vocab_size, vocab_size);
    flag!(num_categories, num_categories);
    flag!(ids_min, ids_min);
    flag!(ids_max, ids_max);
    flag!(periodicity_strength, periodicity);
    flag!(drift_strength, drift);
    flag!(seed, seed);
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let cfg = generator_config(args)?;
    let data = generate_synthetic(&cfg)?;
    let out = args.out.clone().unwrap_or_else(|| args.out_dir.join("dataset.jsonl"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(Error::from)?;
    }
    write_jsonl(&data, &out)?;
    let manifest = json!({
        "command": "generate",
        "seed": cfg.seed,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "checkpoint_format": CHECKPOINT_VERSION,
        "output": out,
        "generator": cfg,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n";
    write_file(&args.out_dir, run::MANIFEST_FILE, &text)?;
    println!("wrote {} users to {}", data.len(), out.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(cfg.require_train().map_err(usage)?)?;
    let (_, records) = run::pretrain(cfg, &data, Some(&cfg.out_dir))?;
    let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "{}: {} steps, final loss {:.6}; outputs in {}",
        cfg.method.name(),
        records.len(),
        last,
        cfg.out_dir.display()
    );
    Ok(())
}

fn finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let mut model = UbsModel::load(cfg.require_checkpoint().map_err(usage)?)?;
    let data = load_dataset(cfg.require_train().map_err(usage)?)?;
    cfg.require_task().map_err(usage)?;
    let records = run::finetune_run(cfg, &mut model, &data, Some(&cfg.out_dir))?;
    println!("finetuned {} steps; outputs in {}", records.len(), cfg.out_dir.display());
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let model = UbsModel::load(cfg.require_checkpoint().map_err(usage)?)?;
    let data = load_dataset(cfg.require_test().map_err(usage)?)?;
    let tasks: Vec<String> = match &cfg.task {
        Some(t) => vec![t.clone()],
        None => model.heads.keys().cloned().collect(),
    };
    if tasks.is_empty() {
        return Err(CliError::Usage("checkpoint has no task heads; finetune first".into()));
    }
    let plan = cfg.plan().map_err(usage)?;
    let mut report = EvalReport::default();
    for t in &tasks {
        report.tasks.push(evaluate(&model, &data, t, &plan)?);
    }
    write_file(&cfg.out_dir, "eval.json", &(report.to_json()? + "\n"))?;
    write_file(&cfg.out_dir, "eval.csv", &report.to_csv())?;
    Manifest::new("eval", cfg).write(&cfg.out_dir)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_dataset(cfg.require_train().map_err(usage)?)?;
    let report = run::bench(cfg, &data).map_err(|e| match e {
        Error::Config(_) => usage(e),
        e => CliError::Runtime(e),
    })?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    write_file(&cfg.out_dir, run::BENCH_FILE, &text)?;
    Manifest::new("bench", cfg).write(&cfg.out_dir)?;
    print!("{}", text);
    Ok(())
}

fn attn(cfg: &RunConfig) -> Result<(), CliError> {
    let model = UbsModel::load(cfg.require_checkpoint().map_err(usage)?)?;
    let data = load_dataset(cfg.require_train().map_err(usage)?)?;
    let maps = run::attention_maps(&model, &data, &cfg.plan().map_err(usage)?, cfg.num_samples, cfg.seed)?;
    let files = run::write_attention(&maps, &cfg.out_dir)?;
    Manifest::new("attn", cfg).write(&cfg.out_dir)?;
    println!("wrote {} files to {}", files.len(), cfg.out_dir.display());
    Ok(())
}

fn export_emb(cfg: &RunConfig) -> Result<(), CliError> {
    let model = UbsModel::load(cfg.require_checkpoint().map_err(usage)?)?;
    let data = load_dataset(cfg.require_train().map_err(usage)?)?;
    let csv = run::export_embeddings(&model, &data, &cfg.plan().map_err(usage)?, cfg.num_samples, cfg.seed)?;
    let path = write_file(&cfg.out_dir, run::EMBEDDINGS_FILE, &csv)?;
    Manifest::new("export-emb", cfg).write(&cfg.out_dir)?;
    println!("wrote {} rows to {}", csv.lines().count().saturating_sub(1), path.display());
    Ok(())
}

fn count_params(cfg: &RunConfig) -> Result<(), CliError> {
    let counts = run::count_params(&cfg.model_config().map_err(usage)?)?;
    let text = serde_json::to_string_pretty(&counts).map_err(Error::from)? + "\n";
    write_file(&cfg.out_dir, "params.json", &text)?;
    Manifest::new("count-params", cfg).write(&cfg.out_dir)?;
    print!("{}", text);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Pretrain(a) => pretrain(&a.load()?),
        Command::Finetune(a) => finetune(&a.load()?),
        Command::Eval(a) => eval(&a.load()?),
        Command::Bench(a) => bench(&a.load()?),
        Command::Attn(a) => attn(&a.load()?),
        Command::ExportEmb(a) => export_emb(&a.load()?),
        Command::CountParams(a) => count_params(&a.load()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {}", msg);
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}", e);
            ExitCode::from(1)
        }
    }
}
