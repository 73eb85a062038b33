use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lloco::encoder::CompressionConfig;
use lloco::eval::{
    latency_bench, latency_table, needle_grid, needle_table, qa_eval, qa_table, throughput_bench, throughput_table,
    train_needle_adaptor, LatencyConfig, NeedleGridConfig, NeedleVariant, ThroughputConfig,
};
use lloco::model::ModelConfig;
use lloco::serving::{preprocess, serve_http, serve_query, Artifacts, GroupPolicy, ServeMode, ServeRequest};
use lloco::synth::{kv_group, KeyPool};
use lloco::trainer::{
    evaluate_pretraining, pretrain_cached, read_examples, synthetic_docs, train_combined, train_group,
    write_examples, write_training_log, PretrainConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "lloco", version, about = "Compress documents offline, finetune per-group adaptors, serve queries")]
struct Cli {
    /// Artifact directory holding the model, store and adaptors.
    #[arg(long, env = "LLOCO_ARTIFACTS", default_value = "artifacts", global = true)]
    artifacts: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy base model and its summary slots into a fresh artifact directory.
    Pretrain(PretrainArgs),
    /// Write a synthetic key-value corpus with a matching training set.
    Synth(SynthArgs),
    /// Compress every `*.txt` document of a corpus and rebuild the passage store.
    Preprocess(PreprocessArgs),
    /// Train and register a LoRA adaptor for one group (or the combined set).
    Finetune(FinetuneArgs),
    /// Answer one question without starting a server.
    Query(QueryArgs),
    /// Serve `POST /v1/query` over HTTP.
    Serve(ServeArgs),
    /// Score a QA set in one or more serving modes.
    Eval(EvalArgs),
    #[command(subcommand)]
    Bench(Bench),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, default_value_t = PretrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reuse a previous run with identical settings from this directory.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "kv")]
    group: String,
    #[arg(long, default_value_t = 10)]
    docs: usize,
    #[arg(long, default_value_t = 2)]
    chunks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON object mapping document ids to group ids.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Artifact directory to write; overrides --artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    /// JSON lines of training examples.
    #[arg(long)]
    train: PathBuf,
    /// Group to train; its examples are selected from the file.
    #[arg(long, conflicts_with = "combined")]
    group: Option<String>,
    /// Train one adaptor on the balanced union of all groups.
    #[arg(long)]
    combined: bool,
    /// Per-group example cap for combined training, as GROUP=N.
    #[arg(long = "cap", value_parser = parse_cap)]
    caps: Vec<(String, usize)>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the step log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Artifact directory to register into; overrides --artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    question: String,
    #[arg(long, default_value = "lloco")]
    mode: ServeMode,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    doc: Option<String>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long, value_enum, default_value_t = GroupPolicy::Strict)]
    policy: GroupPolicy,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long = "group-policy", alias = "policy", value_enum, default_value_t = GroupPolicy::Strict)]
    policy: GroupPolicy,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON lines of QA examples whose documents are in the store.
    #[arg(long, alias = "examples")]
    dataset: PathBuf,
    /// Modes to score; all five by default.
    #[arg(long = "mode")]
    modes: Vec<ServeMode>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Bench {
    /// Per-token decode latency, full context versus summaries.
    Latency {
        #[arg(long, default_value = "results/latency")]
        out: PathBuf,
        /// Context sizes in tokens; `k` multiplies by 1024.
        #[arg(long, value_delimiter = ',', value_parser = parse_size)]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Needle-in-a-haystack grid, finetuned versus unfinetuned.
    Needle {
        #[arg(long, default_value = "results/needle")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = NeedleVariant::Fixed)]
        variant: NeedleVariant,
        #[arg(long, value_delimiter = ',', value_parser = parse_size)]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        depths: Vec<f64>,
        /// Needle documents used to train the needle adaptor.
        #[arg(long, default_value_t = 32)]
        train_docs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finetuning samples/sec with raw context versus summaries.
    Throughput {
        #[arg(long, default_value = "results/throughput")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_cap(s: &str) -> Result<(String, usize), String> {
    let (g, n) = s.split_once('=').ok_or_else(|| format!("expected GROUP=N, got {s:?}"))?;
    Ok((g.to_string(), n.parse().map_err(|e| format!("{e}"))?))
}

fn parse_size(s: &str) -> Result<usize, String> {
    let (digits, scale) = match s.strip_suffix(['k', 'K']) {
        Some(d) => (d, 1024),
        None => (s, 1),
    };
    digits.trim().parse::<usize>().map(|n| n * scale).map_err(|e| format!("{s:?}: {e}"))
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load(dir: &Path) -> anyhow::Result<Artifacts> {
    Artifacts::load(dir).with_context(|| format!("loading artifacts from {}", dir.display()))
}

fn pretrain(dir: &Path, args: PretrainArgs) -> anyhow::Result<()> {
    let config = ModelConfig::default();
    let comp = CompressionConfig::toy();
    let pcfg = PretrainConfig {
        steps: args.steps,
        seed: args.seed,
        ..PretrainConfig::default()
    };
    let cache = args.cache.unwrap_or_else(|| dir.join("cache"));
    let started = Instant::now();
    let (weights, slots, cached) = pretrain_cached(&config, &comp, &pcfg, &cache)?;
    tracing::info!(cached, secs = started.elapsed().as_secs_f64(), "base model ready");
    let held_out = synthetic_docs(30, pcfg.max_chunks, pcfg.max_facts_per_chunk, comp.chunk_length, args.seed ^ 0xe7a1);
    let report = evaluate_pretraining(&weights, &slots, &comp, &held_out)?;
    Artifacts::create(dir, weights, slots, comp)?;
    print_json(&report)
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let comp = CompressionConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut keys = KeyPool::new(&mut rng);
    let docs = kv_group(&mut rng, &mut keys, &args.group, args.docs, args.chunks, 1, comp.chunk_length);
    let corpus = args.out.join("corpus");
    fs::create_dir_all(&corpus)?;
    let mut groups = BTreeMap::new();
    let mut examples = Vec::new();
    for d in &docs {
        fs::write(corpus.join(format!("{}.txt", d.doc_id)), &d.text)?;
        groups.insert(d.doc_id.clone(), d.group_id.clone());
        examples.extend(d.qa_examples());
    }
    fs::write(args.out.join("groups.json"), serde_json::to_vec_pretty(&groups)?)?;
    write_examples(&args.out.join("train.jsonl"), &examples)?;
    println!("wrote {} documents and {} examples to {}", docs.len(), examples.len(), args.out.display());
    Ok(())
}

fn finetune(dir: &Path, args: FinetuneArgs) -> anyhow::Result<()> {
    let mut artifacts = load(args.out.as_deref().unwrap_or(dir))?;
    let examples = read_examples(&args.train)?;
    let defaults = TrainConfig::toy();
    let cfg = TrainConfig {
        lr: args.lr.unwrap_or(defaults.lr),
        epochs: args.epochs.unwrap_or(defaults.epochs),
        max_steps: args.max_steps,
        seed: args.seed,
        ..defaults
    };
    let outcome = if args.combined {
        let caps: BTreeMap<String, usize> = args.caps.into_iter().collect();
        train_combined(&artifacts.weights, &examples, &caps, &artifacts.store, &cfg)?
    } else {
        let Some(group) = args.group else {
            bail!("pass --group GROUP or --combined");
        };
        let selected: Vec<_> = examples.into_iter().filter(|e| e.group_id == group).collect();
        if selected.is_empty() {
            bail!("no training examples for group {group:?}");
        }
        train_group(&artifacts.weights, &group, &selected, &artifacts.store, &cfg)?
    };
    if let Some(path) = &args.log {
        write_training_log(path, &outcome.log)?;
    }
    let record = artifacts.register_adaptor(outcome.adaptor, &cfg.digest())?;
    tracing::info!(initial = outcome.initial_loss, final_ = outcome.final_loss, "trained");
    print_json(&record)
}

fn eval(dir: &Path, args: EvalArgs) -> anyhow::Result<()> {
    let artifacts = load(dir)?;
    let examples = read_examples(&args.dataset)?;
    let modes = if args.modes.is_empty() { ServeMode::ALL.to_vec() } else { args.modes };
    let started = Instant::now();
    let ctx = artifacts.context(GroupPolicy::Strict);
    let reports: Vec<_> = modes.iter().map(|&m| qa_eval(&examples, m, &ctx, 16)).collect();
    let table = qa_table(&reports, &lloco::io::json_digest(&examples), 0, started.elapsed().as_secs_f64());
    table.write(&args.out)?;
    print!("{}", table.to_csv()?);
    Ok(())
}

fn bench(dir: &Path, which: Bench) -> anyhow::Result<()> {
    let artifacts = load(dir)?;
    let started = Instant::now();
    let (table, out) = match which {
        Bench::Latency { out, sizes, seed } => {
            let defaults = LatencyConfig::toy();
            let cfg = LatencyConfig {
                seed,
                sizes: if sizes.is_empty() { defaults.sizes.clone() } else { sizes },
                ..defaults
            };
            let t = latency_bench(&artifacts.weights, &artifacts.slots, artifacts.compression, &cfg)?;
            (latency_table(&t, &cfg.digest(), seed, started.elapsed().as_secs_f64()), out)
        }
        Bench::Needle {
            out,
            variant,
            lengths,
            depths,
            train_docs,
            seed,
        } => {
            let defaults = NeedleGridConfig::toy();
            let cfg = NeedleGridConfig {
                variant,
                seed,
                lengths: if lengths.is_empty() { defaults.lengths.clone() } else { lengths },
                depths: if depths.is_empty() { defaults.depths.clone() } else { depths },
                ..defaults
            };
            let trained = train_needle_adaptor(
                &artifacts.weights,
                &artifacts.slots,
                artifacts.compression,
                variant,
                &[240, 480, 960],
                train_docs,
                &TrainConfig { seed, ..TrainConfig::toy() },
                seed,
            )?;
            let adaptors = HashMap::from([(trained.adaptor.group_id.clone(), trained.adaptor)]);
            let grids = needle_grid(
                &artifacts.weights,
                &artifacts.slots,
                artifacts.compression,
                &adaptors,
                &[ServeMode::CompressedUnfinetuned, ServeMode::Lloco],
                &cfg,
            )?;
            (needle_table(&grids, &cfg.digest(), seed, started.elapsed().as_secs_f64()), out)
        }
        Bench::Throughput { out, seed } => {
            let cfg = ThroughputConfig { seed, ..ThroughputConfig::toy() };
            let r = throughput_bench(&artifacts.weights, &artifacts.slots, artifacts.compression, &cfg)?;
            (throughput_table(&r, &cfg.digest(), seed, started.elapsed().as_secs_f64()), out)
        }
    };
    let (csv, json) = table.write(&out)?;
    for (k, v) in &table.summary {
        println!("{k}: {v:.3}");
    }
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let dir = cli.artifacts.as_path();
    match cli.command {
        Command::Pretrain(args) => pretrain(dir, args),
        Command::Synth(args) => synth(args),
        Command::Preprocess(args) => {
            let groups: BTreeMap<String, String> = match &args.groups {
                Some(p) => serde_json::from_slice(&fs::read(p)?).with_context(|| format!("reading {}", p.display()))?,
                None => BTreeMap::new(),
            };
            let mut artifacts = load(args.out.as_deref().unwrap_or(dir))?;
            print_json(&preprocess(&args.corpus, &groups, &mut artifacts)?)
        }
        Command::Finetune(args) => finetune(dir, args),
        Command::Query(args) => {
            let artifacts = load(dir)?;
            let req = ServeRequest {
                group_id: args.group,
                doc_id: args.doc,
                top_k: args.top_k,
                ..ServeRequest::new(args.question, args.mode)
            };
            print_json(&serve_query(&req, &artifacts.context(args.policy))?)
        }
        Command::Serve(args) => {
            let artifacts = load(dir)?;
            tokio::runtime::Runtime::new()?.block_on(serve_http(args.addr, artifacts, args.policy))?;
            Ok(())
        }
        Command::Eval(args) => eval(dir, args),
        Command::Bench(which) => bench(dir, which),
    }
}
