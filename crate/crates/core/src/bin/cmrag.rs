use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cmrag::ablation::{parse_sweep, run_ablation};
use cmrag::diagnostics::{modality_divergence_report, DEFAULT_BINS};
use cmrag::dsa::{train_toy, write_log_csv, DsaBatch, ToyEncoders, TrainConfig, DEFAULT_LAMBDA};
use cmrag::metrics::{evaluate_run, parse_metric_list, Qrels};
use cmrag::model::{FusionConfig, FusionMode, DEFAULT_BETA, DEFAULT_TOP_K};
use cmrag::queries::{qrels_from_queries, read_queries};
use cmrag::run_file::{read_run, write_run};
use cmrag::store::{build_index, load_index, read_embedding_file, save_index};

#[derive(Parser)]
#[command(
    name = "cmrag",
    version,
    about = "Co-modality page retrieval over image and text embeddings"
)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "CMRAG_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack image and text embedding JSONL files into an index directory.
    Ingest(IngestArgs),
    /// Rank pages for every query and write a run file.
    Retrieve(RetrieveArgs),
    /// Score a run file against qrels.
    Eval(EvalArgs),
    /// Compare fusion modes and text weights on one index and query set.
    Ablate(AblateArgs),
    /// Compare the image and text score distributions.
    Diagnose(DiagnoseArgs),
    /// Train the toy text encoder with the dual-sigmoid alignment loss.
    TrainToy(TrainArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    texts: PathBuf,
    /// L2-normalize every row before packing.
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value = "ucmr")]
    mode: FusionMode,
    /// Text weight for raw-linear fusion.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Text weight for z-scored fusion.
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// Run file path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    Json,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value = "recall@1,recall@3,ndcg@10,mrr@10")]
    metrics: String,
    #[arg(long, value_enum, default_value_t = Format::Tsv)]
    format: Format,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Qrels TSV; the queries' inline gold lists are used when omitted.
    #[arg(long)]
    qrels: Option<PathBuf>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "image-only,text-only,raw-linear,ucmr"
    )]
    modes: Vec<FusionMode>,
    /// Text weights LO:HI:STEP (alpha for raw-linear, beta otherwise).
    #[arg(long)]
    beta_sweep: Option<String>,
    #[arg(long, default_value = "recall@1,recall@3,ndcg@10,mrr@10")]
    metrics: String,
    #[arg(long, value_enum, default_value_t = Format::Tsv)]
    format: Format,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// Query channel policy (ensemble-ucmr sweeps each modality with its own channel).
    #[arg(long, default_value = "ucmr")]
    mode: FusionMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mini-batch size; full batch when omitted.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Shared embedding width; defaults to the query feature width.
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(file))
}

fn ingest(args: IngestArgs) -> Result<()> {
    let start = Instant::now();
    let images = read_embedding_file(&args.images)?;
    let texts = read_embedding_file(&args.texts)?;
    let index = build_index(images, texts, args.normalize)?;
    save_index(&index, &args.out)?;
    eprintln!(
        "M={} d={} build_ms={:.1}",
        index.len(),
        index.dim(),
        start.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn retrieve(args: RetrieveArgs) -> Result<()> {
    let cfg = FusionConfig::new(args.mode)
        .with_alpha(args.alpha)
        .with_beta(args.beta)
        .with_top_k(args.k);
    cfg.validate()?;
    let index = load_index(&args.index)?;
    let queries = read_queries(open(&args.queries)?)?;
    let results = cmrag::retrieve_all(&queries, &index, &cfg)?;
    match args.out {
        Some(path) => write_run(create(&path)?, &results)?,
        None => write_run(io::stdout().lock(), &results)?,
    }
    eprintln!(
        "queries={} mode={} k={}",
        results.len(),
        cfg.mode,
        cfg.top_k
    );
    Ok(())
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let metrics = parse_metric_list(&args.metrics)?;
    let run = read_run(open(&args.run)?)?;
    let qrels = Qrels::read(open(&args.qrels)?)?;
    let report = evaluate_run(&run, &qrels, &metrics)?;
    for q in &report.missing_queries {
        eprintln!("warning: query {q} has no lines in the run");
    }
    match args.format {
        Format::Tsv => report.write_tsv(io::stdout().lock())?,
        Format::Json => print_json(&report.to_json())?,
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<()> {
    let metrics = parse_metric_list(&args.metrics)?;
    let weights = match &args.beta_sweep {
        Some(sweep) => parse_sweep(sweep)?,
        None => Vec::new(),
    };
    let index = load_index(&args.index)?;
    let queries = read_queries(open(&args.queries)?)?;
    let qrels = match &args.qrels {
        Some(path) => Qrels::read(open(path)?)?,
        None => qrels_from_queries(&queries),
    };
    if qrels.is_empty() {
        bail!("no qrels: pass --qrels or add gold lists to the queries");
    }
    let table = run_ablation(&index, &queries, &qrels, &args.modes, &weights, &metrics)?;
    match args.format {
        Format::Tsv => table.write_tsv(io::stdout().lock())?,
        Format::Json => print_json(&serde_json::to_value(&table)?)?,
    }
    Ok(())
}

fn diagnose(args: DiagnoseArgs) -> Result<()> {
    if args.bins == 0 {
        bail!("--bins must be at least 1");
    }
    let index = load_index(&args.index)?;
    let queries = read_queries(open(&args.queries)?)?;
    let cfg = FusionConfig::new(args.mode);
    let report = modality_divergence_report(&index, &queries, &cfg, args.bins)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    report.write_csv(create(&args.out.join("histogram.csv"))?)?;
    let mut summary = create(&args.out.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut summary, &report.summary_json())?;
    writeln!(summary)?;
    summary.flush()?;
    eprintln!(
        "KL(I||T)={:.6} KL(T||I)={:.6} sigma_zero={}",
        report.kl_image_text,
        report.kl_text_image,
        report.degenerate.len()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        lambda: args.lambda,
        learning_rate: args.lr,
        steps: args.steps,
        batch_size: args.batch_size,
        momentum: args.momentum,
        seed: args.seed,
        embed_dim: args.embed_dim,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let data = DsaBatch::read_jsonl(open(&args.triplets)?)?;
    let embed_dim = cfg.embed_dim.unwrap_or(data.query.ncols());
    let encoders = ToyEncoders::init(
        embed_dim,
        data.query.ncols(),
        data.image.ncols(),
        data.text.ncols(),
        cfg.seed,
    );
    let outcome = train_toy(&data, encoders, &cfg)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_log_csv(create(&args.out.join("train_log.csv"))?, &outcome.log)?;
    let mut report = create(&args.out.join("report.json"))?;
    serde_json::to_writer_pretty(&mut report, &outcome.report)?;
    writeln!(report)?;
    report.flush()?;
    let mut enc = create(&args.out.join("encoders.json"))?;
    serde_json::to_writer(&mut enc, &outcome.encoders)?;
    writeln!(enc)?;
    enc.flush()?;
    let r = &outcome.report;
    eprintln!(
        "loss {:.6} -> {:.6} (ratio {:.4}) mrr@1={:.3}",
        r.initial_loss, r.final_loss, r.loss_ratio, r.self_retrieval_mrr_at_1
    );
    if r.non_decreasing_loss {
        eprintln!("warning: loss did not decrease");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("building thread pool")?;
    pool.install(|| match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Diagnose(a) => diagnose(a),
        Command::TrainToy(a) => train(a),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
