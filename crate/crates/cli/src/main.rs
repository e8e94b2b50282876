use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mtscore::adapters::LoraConfig;
use mtscore::backbone::{pretrain, tokenize, Backbone, BackboneConfig, MlmConfig};
use mtscore::dataset::TaskDataset;
use mtscore::evalkit::{evaluate, paired_t_test};
use mtscore::numerics::{Precision, Reduction, Rng};
use mtscore::orchestrator::{serve, serve_tcp, Registry, DEFAULT_CAPACITY};
use mtscore::trainer::{split_dataset, train_task, TrainConfig};
use mtscore::workbench::{
    default_specs, generate_tasks, run_benchmark, write_baseline_copies, BenchConfig, BenchTask, DataManifest,
    TaskSpec, DATA_MANIFEST,
};

#[derive(Parser)]
#[command(name = "mtscore", version, about = "Multi-task scoring with a shared frozen encoder and per-task LoRA modules")]
struct Cli {
    /// Scalar precision for all computation.
    #[arg(long, global = true, value_enum, default_value = "32")]
    precision: PrecisionArg,

    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    #[value(name = "32")]
    P32,
    #[value(name = "64")]
    P64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::P32 => Precision::P32,
            PrecisionArg::P64 => Precision::P64,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scored-response datasets.
    GenData(GenDataArgs),
    /// Build a backbone and pretrain it with masked-token prediction.
    Pretrain(PretrainArgs),
    /// Train one task module on a frozen backbone.
    Finetune(FinetuneArgs),
    /// Evaluate a task module on a test split.
    Eval(EvalArgs),
    /// Compare the framework with per-task full models.
    Bench(BenchArgs),
    /// Answer newline-delimited JSON scoring requests.
    Serve(ServeArgs),
    /// Paired t-test between two per-task score vectors.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON list of task specs; overrides --tasks/--items.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 27)]
    tasks: usize,
    #[arg(long, default_value_t = 1000)]
    items: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    /// JSONL files with a "text" field, or dataset directories with a manifest.
    #[arg(long, required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Use at most this many texts.
    #[arg(long)]
    max_texts: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// Task dataset (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Number of score classes; defaults to the largest score + 1.
    #[arg(long)]
    classes: Option<usize>,
    /// Output task module file.
    #[arg(long)]
    out: PathBuf,
    /// Training report (TOML).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the held-out test split here (JSONL).
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 5e-5)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Defaults to 2, or to --epochs when that is smaller.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long, default_value_t = 0.10)]
    warmup: f64,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    /// Sum the per-example losses instead of averaging them.
    #[arg(long)]
    sum_loss: bool,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 16.0)]
    alpha: f64,
    /// Apply ΔW = A·B without the alpha/r scale.
    #[arg(long)]
    literal_delta: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    module: PathBuf,
    /// Dataset (JSONL). Its test split is used unless --whole is given.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    /// Evaluate every record instead of the seeded test split.
    #[arg(long)]
    whole: bool,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// Registry manifest: JSON map of task id to module path.
    #[arg(long)]
    manifest: PathBuf,
    /// Dataset directory used for workload texts.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    capacity: usize,
    #[arg(long, default_value_t = 100)]
    switches: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Requests in the replayed workload.
    #[arg(long, default_value_t = 1000)]
    requests: usize,
    /// Where the per-task full-model copies are written.
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// Registry manifest: JSON map of task id to module path.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    capacity: usize,
    /// Listen on this TCP port instead of standard input/output.
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

#[derive(Args)]
struct CompareArgs {
    /// JSON array of per-task scores (or a list of EvalReports).
    a: PathBuf,
    b: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let precision = Precision::from(cli.precision);
    match cli.command {
        Command::GenData(a) => gen_data(a, cli.seed),
        Command::Pretrain(a) => pretrain_cmd(a, cli.seed, precision),
        Command::Finetune(a) => finetune(a, cli.seed, precision),
        Command::Eval(a) => eval(a, cli.seed, precision),
        Command::Bench(a) => bench(a, cli.seed, precision),
        Command::Serve(a) => serve_cmd(a, precision),
        Command::Compare(a) => compare(a),
    }
}

fn gen_data(a: GenDataArgs, seed: u64) -> Result<()> {
    let specs: Vec<TaskSpec> = match &a.spec {
        Some(p) => serde_json::from_slice(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => default_specs(a.tasks, a.items, seed),
    };
    let manifest = generate_tasks(&specs, &a.out)?;
    println!("wrote {} tasks to {}", manifest.tasks.len(), a.out.display());
    Ok(())
}

fn read_texts(path: &Path, out: &mut Vec<String>) -> Result<()> {
    if path.is_dir() {
        let manifest = DataManifest::load(path.join(DATA_MANIFEST))?;
        for t in &manifest.tasks {
            read_texts(&path.join(&t.path), out)?;
        }
        return Ok(());
    }
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        match v.get("text").and_then(|t| t.as_str()) {
            Some(t) => out.push(t.to_string()),
            None => bail!("{}:{}: record has no \"text\"", path.display(), n + 1),
        }
    }
    Ok(())
}

fn pretrain_cmd(a: PretrainArgs, seed: u64, precision: Precision) -> Result<()> {
    let config = BackboneConfig {
        vocab_size: a.vocab_size,
        d_model: a.d_model,
        n_layers: a.layers,
        n_heads: a.heads,
        d_ff: a.d_ff,
        max_seq_len: a.max_len,
        seed,
    };
    let mut texts = Vec::new();
    for p in &a.corpus {
        read_texts(p, &mut texts)?;
    }
    if let Some(max) = a.max_texts {
        Rng::new(seed).split("corpus").shuffle(&mut texts);
        texts.truncate(max);
    }
    let corpus: Vec<_> = texts.iter().map(|t| tokenize(t, &config)).collect();
    let mut backbone = Backbone::new(config, precision)?;
    if a.epochs > 0 {
        let mlm = MlmConfig {
            learning_rate: a.lr,
            batch_size: a.batch_size,
            epochs: a.epochs,
            seed,
            ..Default::default()
        };
        let losses = pretrain(&mut backbone, &corpus, mlm)?;
        for (i, l) in losses.iter().enumerate() {
            println!("epoch {} mlm_loss {l:.6}", i + 1);
        }
    }
    let backbone = backbone.freeze();
    backbone.save(prepare(&a.out)?).with_context(|| format!("writing {}", a.out.display()))?;
    println!("fingerprint {}", backbone.fingerprint());
    Ok(())
}

fn load_backbone(path: &Path, precision: Precision) -> Result<Backbone> {
    let b = Backbone::load(path).with_context(|| format!("loading backbone {}", path.display()))?;
    let b = if b.precision() == precision { b } else { b.to_precision(precision) };
    Ok(b.freeze())
}

fn load_dataset(path: &Path, classes: Option<usize>) -> Result<TaskDataset> {
    TaskDataset::load(path, None, classes).with_context(|| format!("loading dataset {}", path.display()))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn finetune(a: FinetuneArgs, seed: u64, precision: Precision) -> Result<()> {
    let backbone = load_backbone(&a.backbone, precision)?;
    let dataset = load_dataset(&a.data, a.classes)?;
    let splits = split_dataset(&dataset, seed)?;
    let config = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        patience: a.patience.unwrap_or(a.epochs.min(2)),
        warmup_fraction: a.warmup,
        clip_norm: a.clip,
        lambda: a.lambda,
        reduction: if a.sum_loss { Reduction::Sum } else { Reduction::Mean },
        seed,
    };
    let lora = LoraConfig {
        rank: a.rank,
        alpha: a.alpha,
        literal_delta: a.literal_delta,
        ..Default::default()
    };
    let (mut module, report) = train_task(&backbone, &splits.train, &splits.val, &config, &lora)?;
    module.metadata.created_at = now();
    module.save(prepare(&a.out)?).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.report {
        std::fs::write(prepare(p)?, report.to_toml()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.test_out {
        splits.test.save(prepare(p)?).with_context(|| format!("writing {}", p.display()))?;
    }
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "task {} stopped at epoch {} (best {}), val_loss {:.6}, val_qwk {:.4}",
        report.task_id, report.stopped_epoch, report.best_epoch, report.best_val_loss, last.val_qwk
    );
    Ok(())
}

fn eval(a: EvalArgs, seed: u64, precision: Precision) -> Result<()> {
    let backbone = load_backbone(&a.backbone, precision)?;
    let dataset = load_dataset(&a.data, a.classes)?;
    let test = if a.whole { dataset } else { split_dataset(&dataset, seed)?.test };
    let registry = Registry::new(1, precision)?;
    registry.register(&test.task_id, &a.module)?;
    let report = evaluate(&registry, &backbone, &test.task_id, &test)?;
    emit(a.out.as_deref(), &report.to_json())
}

/// Creates the parent directory of an output path.
fn prepare(path: &Path) -> Result<&Path> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(path)
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(prepare(p)?, format!("{text}\n")).with_context(|| format!("writing {}", p.display())),
        None => match writeln!(std::io::stdout(), "{text}") {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
            r => r.context("writing to stdout"),
        },
    }
}

fn bench(a: BenchArgs, seed: u64, precision: Precision) -> Result<()> {
    let backbone = load_backbone(&a.backbone, precision)?;
    let registry = Registry::from_manifest(&a.manifest, a.capacity, precision)?;
    let ids = registry.task_ids();
    if ids.is_empty() {
        bail!("manifest {} lists no tasks", a.manifest.display());
    }
    let scratch;
    let work_dir = match &a.work_dir {
        Some(d) => d.clone(),
        None => {
            scratch = std::env::temp_dir().join(format!("mtscore-bench-{}", std::process::id()));
            scratch.clone()
        }
    };
    let baseline = write_baseline_copies(&backbone, &ids, &work_dir)?;
    let tasks: Vec<BenchTask> = ids
        .iter()
        .zip(baseline)
        .map(|(id, baseline_path)| BenchTask {
            task_id: id.clone(),
            module_path: registry.path_of(id).expect("registered"),
            baseline_path,
        })
        .collect();

    let mut texts: Vec<Vec<String>> = vec![Vec::new(); ids.len()];
    if let Some(dir) = &a.data {
        let manifest = DataManifest::load(dir.join(DATA_MANIFEST))?;
        for entry in &manifest.tasks {
            if let Some(i) = ids.iter().position(|id| *id == entry.id) {
                let ds = TaskDataset::load(dir.join(&entry.path), Some(&entry.id), Some(entry.num_classes))?;
                texts[i] = ds.examples.into_iter().map(|e| e.text).collect();
            }
        }
    }
    let mut rng = Rng::new(seed).split("workload");
    let workload: Vec<(String, String)> = (0..a.requests)
        .map(|_| {
            let i = rng.below(ids.len());
            let text = match texts[i].len() {
                0 => "die antwort".to_string(),
                n => texts[i][rng.below(n)].clone(),
            };
            (ids[i].clone(), text)
        })
        .collect();

    let config = BenchConfig {
        capacity: a.capacity,
        switches: a.switches,
        warmup: a.warmup,
        threads: a.threads,
    };
    let report = run_benchmark(&backbone, &tasks, &workload, &config);
    if a.work_dir.is_none() {
        let _ = std::fs::remove_dir_all(&work_dir);
    }
    emit(a.out.as_deref(), &report?.to_json())
}

fn serve_cmd(a: ServeArgs, precision: Precision) -> Result<()> {
    let backbone = load_backbone(&a.backbone, precision)?;
    let registry = Registry::from_manifest(&a.manifest, a.capacity, precision)?;
    match a.port {
        Some(port) => {
            eprintln!("listening on {}:{port}", a.host);
            serve_tcp(Arc::new(registry), Arc::new(backbone), (a.host.as_str(), port))?;
        }
        None => {
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            let summary = serve(&registry, &backbone, stdin.lock(), stdout.lock())?;
            std::io::stderr().flush()?;
            let stats = registry.stats();
            eprintln!(
                "requests {} errors {} hits {} misses {} evictions {}",
                summary.requests, summary.errors, stats.hits, stats.misses, stats.evictions
            );
        }
    }
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).with_context(|| format!("reading {}", path.display()))?)
        .with_context(|| format!("parsing {}", path.display()))?;
    let Some(items) = v.as_array() else {
        bail!("{}: expected a JSON array", path.display());
    };
    items
        .iter()
        .map(|x| {
            x.as_f64()
                .or_else(|| x.get("qwk").and_then(|q| q.as_f64()))
                .with_context(|| format!("{}: entries must be numbers or reports with \"qwk\"", path.display()))
        })
        .collect()
}

#[derive(Serialize)]
struct Comparison {
    n: usize,
    mean_diff: f64,
    /// A string when the differences have zero spread.
    t: serde_json::Value,
    df: usize,
    p: f64,
}

fn compare(a: CompareArgs) -> Result<()> {
    let (x, y) = (read_scores(&a.a)?, read_scores(&a.b)?);
    let r = paired_t_test(&x, &y)?;
    let t = if r.t.is_finite() {
        serde_json::json!(r.t)
    } else {
        serde_json::json!(if r.t > 0.0 { "inf" } else { "-inf" })
    };
    let out = Comparison {
        n: x.len(),
        mean_diff: r.mean_diff,
        t,
        df: r.df,
        p: r.p,
    };
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}
