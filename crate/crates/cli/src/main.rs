mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use finemoe::atlas::{cluster, collect_signature, correlation_matrix, sample_documents, DEFAULT_DOCUMENTS};
use finemoe::model::{forward_logits, init_dense, AnyCheckpoint, ModelConfig};
use finemoe::train::{
    encode, read_documents, MixtureSchedule, RunConfig, TokenSource, Trainer, TrainRunReport,
};
use finemoe::upcycle::{build_pseudo_moe, expand_to_full_moe, verify_equivalence, ScaleMode, UpcyclePlan};
use finemoe::{Checkpoint, Error, RoutingLog, Scalar};
use indexmap::IndexMap;

use output::{write_atomic, write_json};

#[derive(Parser)]
#[command(name = "finemoe", version, about = "Dense-to-MoE upcycling, toy training and expert-routing analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Multiplier,
    Weight,
}

impl From<ScaleArg> for ScaleMode {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Multiplier => ScaleMode::ForwardMultiplier,
            ScaleArg::Weight => ScaleMode::WeightScale,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Randomly initialize a dense checkpoint from a model or run config.
    InitDense {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Train a checkpoint on the corpora named in a run config.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV; defaults to `<out>.metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f32")]
        precision: Precision,
    },
    /// Slice a dense checkpoint into the equivalent pseudo-MoE.
    Upcycle {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        scale_mode: Option<ScaleArg>,
        #[arg(long, value_enum)]
        precision: Option<Precision>,
    },
    /// Compare a dense checkpoint with a pseudo-MoE on random probes; exit 0 iff equivalent.
    VerifyEquivalence {
        #[arg(long)]
        dense: PathBuf,
        #[arg(long)]
        moe: PathBuf,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        #[arg(long)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replicate pseudo-MoE experts to the full pool with Drop-Upcycling.
    Expand {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        drop_ratio: Option<f64>,
        #[arg(long, value_enum)]
        precision: Option<Precision>,
    },
    /// Write the routing decisions for a corpus as JSON lines.
    RouteLog {
        #[arg(long = "in")]
        input: PathBuf,
        /// Raw byte corpus, one document per line.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_DOCUMENTS)]
        docs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Language signatures, their correlation matrix and the average-linkage tree.
    Atlas {
        #[arg(long = "in")]
        input: PathBuf,
        /// Run config whose `sources` map language ids to corpora.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_DOCUMENTS)]
        docs: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage report of a mixture schedule over a token budget.
    MixturePlan {
        #[arg(long)]
        schedule: PathBuf,
        #[arg(long)]
        tokens: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Validation problems exit with 1, failures during the work itself with 2.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

fn classify(err: anyhow::Error) -> Failure {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite { .. } | Error::Optimizer(_) | Error::UndefinedCorrelation(_) | Error::Io(_)) => {
            Failure::Runtime(err)
        }
        _ if err.downcast_ref::<std::io::Error>().is_some() => Failure::Runtime(err),
        _ => Failure::Validation(err),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Validation(anyhow!("{} does not exist", path.display())))
    }
}

fn require_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(Failure::Validation(anyhow!("output directory {} does not exist", p.display())))
        }
        _ => Ok(()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint> {
    AnyCheckpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Bare model config, or the `model` field of a run config.
fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let run: RunConfig = read_json(path)?;
    match run.model {
        Some(m) => Ok(m),
        None => read_json(path),
    }
}

fn save<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

fn to_precision(any: AnyCheckpoint, precision: Option<Precision>) -> AnyCheckpoint {
    match (precision, any) {
        (Some(Precision::F32), AnyCheckpoint::F64(c)) => AnyCheckpoint::F32(c.cast()),
        (Some(Precision::F64), AnyCheckpoint::F32(c)) => AnyCheckpoint::F64(c.cast()),
        (_, any) => any,
    }
}

fn run(command: Command) -> Result<ExitCode, Failure> {
    match command {
        Command::InitDense { config, seed, out, precision } => {
            require_file(&config)?;
            require_parent(&out)?;
            init_dense_cmd(&config, seed, &out, precision).map_err(classify)?;
        }
        Command::Train { input, config, steps, seed, out, metrics, precision } => {
            require_file(&input)?;
            require_file(&config)?;
            require_parent(&out)?;
            let metrics = metrics.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".metrics.csv");
                PathBuf::from(p)
            });
            require_parent(&metrics)?;
            train_cmd(&input, &config, steps, seed, &out, &metrics, precision).map_err(classify)?;
        }
        Command::Upcycle { input, plan, out, scale_mode, precision } => {
            require_file(&input)?;
            require_file(&plan)?;
            require_parent(&out)?;
            upcycle_cmd(&input, &plan, &out, scale_mode, precision).map_err(classify)?;
        }
        Command::VerifyEquivalence { dense, moe, probes, seed, out } => {
            require_file(&dense)?;
            require_file(&moe)?;
            if let Some(o) = &out {
                require_parent(o)?;
            }
            let passed = verify_cmd(&dense, &moe, probes, seed, out.as_deref()).map_err(classify)?;
            return Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Expand { input, plan, seed, out, drop_ratio, precision } => {
            require_file(&input)?;
            require_file(&plan)?;
            require_parent(&out)?;
            expand_cmd(&input, &plan, seed, &out, drop_ratio, precision).map_err(classify)?;
        }
        Command::RouteLog { input, corpus, seed, docs, out } => {
            require_file(&input)?;
            require_file(&corpus)?;
            require_parent(&out)?;
            route_log_cmd(&input, &corpus, seed, docs, &out).map_err(classify)?;
        }
        Command::Atlas { input, config, seed, docs, out } => {
            require_file(&input)?;
            require_file(&config)?;
            atlas_cmd(&input, &config, seed, docs, &out).map_err(classify)?;
        }
        Command::MixturePlan { schedule, tokens, out } => {
            require_file(&schedule)?;
            if !(tokens >= 0.0 && tokens.is_finite()) {
                return Err(Failure::Validation(anyhow!("--tokens must be a finite non-negative number")));
            }
            mixture_plan_cmd(&schedule, tokens, out.as_deref()).map_err(classify)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn init_dense_cmd(config: &Path, seed: u64, out: &Path, precision: Precision) -> Result<()> {
    let cfg = load_model_config(config)?;
    match precision {
        Precision::F32 => save(&init_dense::<f32>(&cfg, seed)?, out),
        Precision::F64 => save(&init_dense::<f64>(&cfg, seed)?, out),
    }
}

fn train_cmd(
    input: &Path,
    config: &Path,
    steps: u64,
    seed: u64,
    out: &Path,
    metrics: &Path,
    precision: Precision,
) -> Result<()> {
    let run: RunConfig = read_json(config)?;
    let train = run.train.ok_or_else(|| Error::Config("run config has no `train` section".into()))?;
    if run.sources.is_empty() {
        bail!(Error::Config("run config lists no corpus sources".into()));
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let mut sources = IndexMap::new();
    for (id, path) in &run.sources {
        let path = base.join(path);
        let src = TokenSource::from_file(&path).with_context(|| format!("reading corpus {}", path.display()))?;
        sources.insert(id.clone(), src);
    }
    let mixture = match run.mixture {
        Some(m) => m.normalized()?,
        None if sources.len() == 1 => MixtureSchedule::single(sources.keys().next().expect("one source")),
        None => bail!(Error::Config("several sources need a `mixture` section".into())),
    };
    let any = to_precision(load_checkpoint(input)?, Some(precision));
    let report = match any {
        AnyCheckpoint::F32(c) => train_with(c, train, mixture, &sources, seed, steps, out)?,
        AnyCheckpoint::F64(c) => train_with(c, train, mixture, &sources, seed, steps, out)?,
    };
    write_atomic(metrics, report.to_csv().as_bytes())
}

fn train_with<T: Scalar>(
    ckpt: Checkpoint<T>,
    train: finemoe::train::TrainConfig,
    mixture: MixtureSchedule,
    sources: &IndexMap<String, TokenSource>,
    seed: u64,
    steps: u64,
    out: &Path,
) -> Result<TrainRunReport> {
    let (ckpt, mut report) = Trainer::new(ckpt, train, mixture, sources, seed)?.run(steps)?;
    save(&ckpt, out)?;
    report.final_checkpoint = Some(out.display().to_string());
    if let Some(last) = report.steps.last() {
        eprintln!("step {} tokens {} lm {:.4} total {:.4}", last.step, last.tokens_seen, last.lm, last.total);
    }
    Ok(report)
}

fn load_plan(path: &Path) -> Result<UpcyclePlan> {
    read_json(path)
}

fn upcycle_cmd(
    input: &Path,
    plan: &Path,
    out: &Path,
    scale_mode: Option<ScaleArg>,
    precision: Option<Precision>,
) -> Result<()> {
    let mut plan = load_plan(plan)?;
    if let Some(mode) = scale_mode {
        plan.scale_mode = mode.into();
    }
    match to_precision(load_checkpoint(input)?, precision) {
        AnyCheckpoint::F32(c) => save(&build_pseudo_moe(&c, &plan)?, out),
        AnyCheckpoint::F64(c) => save(&build_pseudo_moe(&c, &plan)?, out),
    }
}

fn verify_cmd(dense: &Path, moe: &Path, probes: usize, seed: u64, out: Option<&Path>) -> Result<bool> {
    let a: Checkpoint<f64> = load_checkpoint(dense)?.into_precision();
    let b: Checkpoint<f64> = load_checkpoint(moe)?.into_precision();
    let report = verify_equivalence(&a, &b, probes, seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(report.passed)
}

fn expand_cmd(
    input: &Path,
    plan: &Path,
    seed: u64,
    out: &Path,
    drop_ratio: Option<f64>,
    precision: Option<Precision>,
) -> Result<()> {
    let mut plan = load_plan(plan)?;
    plan.seed = seed;
    if let Some(r) = drop_ratio {
        plan.drop_ratio = r;
    }
    match to_precision(load_checkpoint(input)?, precision) {
        AnyCheckpoint::F32(c) => save(&expand_to_full_moe(&c, &plan)?, out),
        AnyCheckpoint::F64(c) => save(&expand_to_full_moe(&c, &plan)?, out),
    }
}

fn sampled_docs(corpus: &Path, n: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let docs = read_documents(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    Ok(sample_documents(docs.len(), n, seed)
        .into_iter()
        .map(|i| encode(&docs[i]))
        .collect())
}

fn route_log_cmd(input: &Path, corpus: &Path, seed: u64, n_docs: usize, out: &Path) -> Result<()> {
    let ckpt: Checkpoint<f64> = load_checkpoint(input)?.into_precision();
    let moe = ckpt.config.moe_config()?;
    let mut log = RoutingLog::new(moe.n_experts, moe.top_k);
    for doc in sampled_docs(corpus, n_docs, seed)? {
        let routing = forward_logits(&doc, &ckpt)?
            .routing
            .ok_or_else(|| Error::Misuse("checkpoint produced no routing".into()))?;
        log.merge(routing);
    }
    write_atomic(out, log.to_jsonl()?.as_bytes())
}

fn atlas_cmd(input: &Path, config: &Path, seed: u64, n_docs: usize, out: &Path) -> Result<()> {
    let run: RunConfig = read_json(config)?;
    if run.sources.len() < 2 {
        bail!(Error::Config("atlas needs at least two languages in `sources`".into()));
    }
    let ckpt: Checkpoint<f64> = load_checkpoint(input)?.into_precision();
    let base = config.parent().unwrap_or(Path::new("."));
    let mut signatures = Vec::with_capacity(run.sources.len());
    for (language, path) in &run.sources {
        let docs = sampled_docs(&base.join(path), n_docs, seed)?;
        signatures.push(collect_signature(&ckpt, language, &docs)?);
    }
    let corr = correlation_matrix(&signatures)?;
    let tree = cluster(&corr)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("signatures.json"), &signatures)?;
    write_atomic(&out.join("correlation.csv"), corr.to_csv().as_bytes())?;
    write_atomic(&out.join("dendrogram.nwk"), format!("{}\n", tree.to_newick()).as_bytes())?;
    println!("{}", tree.to_newick());
    Ok(())
}

fn mixture_plan_cmd(schedule: &Path, tokens: f64, out: Option<&Path>) -> Result<()> {
    let mixture = MixtureSchedule::load(schedule).with_context(|| format!("loading {}", schedule.display()))?;
    let spans = mixture.plan(tokens);
    println!("{}", serde_json::to_string_pretty(&spans)?);
    if let Some(path) = out {
        write_json(path, &spans)?;
    }
    Ok(())
}
