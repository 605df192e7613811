use std::fs::File;
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::{Child, Command, ExitCode};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use shapflow::bench::{run_bench, write_csv, BenchSweep};
use shapflow::comm::{Communicator, ReduceOrder, SocketComm, ENV_COORD, ENV_RANK, ENV_WORLD};
use shapflow::document::ExplanationDocument;
use shapflow::gnn::{load_model, GcnModel, DEFAULT_BATCH_SIZE};
use shapflow::graph::{load_graph, Graph};
use shapflow::pipeline::{
    explain_collective, explain_threads, oracle_node, rescore, save_oracle_records, Backend,
    ExplainConfig, NodeSelection, DEFAULT_PLAYER_CAP,
};
use shapflow::solver::{CglsOptions, DEFAULT_TOL};
use shapflow::synthetic::{generate, SyntheticKind, SyntheticSpec};
use shapflow::{Error, ErrorKind};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(
    name = "shapflow",
    version,
    about = "Shapley-value edge explanations for GCN node predictions"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Explain node predictions with sampled Shapley values.
    Explain(ExplainArgs),
    /// Exact Shapley values by enumeration (at most 22 edges).
    Oracle(OracleArgs),
    /// Generate a synthetic graph and a matching model.
    Gen(GenArgs),
    /// Time the pipeline over a sweep of settings and write CSV.
    Bench(BenchArgs),
    /// Re-score the fidelity of an existing explanation document.
    Fidelity(FidelityArgs),
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Threads,
    Procs,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Comma-separated node ids or `degree-range:[lo,hi]:count`.
    #[arg(long)]
    nodes: String,
    /// Sample budget k (even); defaults to 60000, or 600000 for 5000+ edges.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, value_enum, default_value = "threads")]
    backend: BackendArg,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 20])]
    top_k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
    sparsity: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Sample even when every coalition would fit in the budget.
    #[arg(long)]
    force_sampled: bool,
    #[arg(long, default_value_t = DEFAULT_PLAYER_CAP)]
    player_cap: usize,
    #[arg(long, default_value_t = shapflow::fidelity::DEFAULT_BASELINE_TRIALS)]
    baseline_trials: usize,
    /// Also write the Shapley vectors to this binary sidecar.
    #[arg(long)]
    phi_sidecar: Option<PathBuf>,
    /// Sum reductions in arrival order (faster, not reproducible).
    #[arg(long)]
    unordered_reductions: bool,
    /// Seconds a rank waits in a collective before giving up.
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Comma-separated node ids.
    #[arg(long, alias = "node")]
    nodes: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    PlantedMotif,
    Random,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "planted-motif")]
    kind: KindArg,
    #[arg(long, default_value_t = 200)]
    nodes: usize,
    #[arg(long, default_value_t = 4.0)]
    avg_degree: f64,
    /// Feature dimension.
    #[arg(long, short = 'd', default_value_t = 8)]
    features: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Hidden width of the random model.
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output graph; `.txt`/`.edges` writes an edge list plus a CSV sidecar.
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    node: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1])]
    workers: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [60_000])]
    samples: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [DEFAULT_BATCH_SIZE])]
    batch_size: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    force_sampled: bool,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FidelityArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Existing explanation document.
    #[arg(long)]
    doc: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [5, 10, 20])]
    top_k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
    sparsity: Vec<f64>,
    #[arg(long, default_value_t = shapflow::fidelity::DEFAULT_BASELINE_TRIALS)]
    baseline_trials: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load_inputs(inputs: &Inputs) -> anyhow::Result<(Graph, GcnModel)> {
    let graph = load_graph(&inputs.graph)
        .with_context(|| format!("loading graph {}", inputs.graph.display()))?;
    let model = load_model(&inputs.model)
        .with_context(|| format!("loading model {}", inputs.model.display()))?;
    Ok((graph, model))
}

fn explain_config(args: &ExplainArgs) -> anyhow::Result<ExplainConfig> {
    let nodes: NodeSelection = args.nodes.parse()?;
    let mut cfg = ExplainConfig::new(
        args.inputs.graph.clone(),
        args.inputs.model.clone(),
        nodes,
        args.out.clone(),
    );
    cfg.samples = args.samples;
    cfg.workers = args.workers;
    cfg.backend = match args.backend {
        BackendArg::Threads => Backend::Threads,
        BackendArg::Procs => Backend::Procs,
    };
    cfg.batch_size = args.batch_size;
    cfg.top_k = args.top_k.clone();
    cfg.sparsity = args.sparsity.clone();
    cfg.seed = args.seed;
    cfg.tol = args.tol;
    cfg.max_iter = args.max_iter;
    cfg.force_sampled = args.force_sampled;
    cfg.player_cap = args.player_cap;
    cfg.baseline_trials = args.baseline_trials;
    cfg.reduce_order = if args.unordered_reductions {
        ReduceOrder::Arrival
    } else {
        ReduceOrder::Tree
    };
    cfg.timeout = Duration::from_secs(args.timeout_secs);
    cfg.validate()?;
    Ok(cfg)
}

fn write_document(doc: &ExplanationDocument, args: &ExplainArgs) -> anyhow::Result<()> {
    doc.save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.phi_sidecar {
        doc.write_phi_sidecar(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    info!(
        "wrote {} explanations to {}",
        doc.nodes.len(),
        args.out.display()
    );
    Ok(())
}

/// Spawns ranks `1..workers` as copies of this executable with the same
/// arguments, then takes part as rank 0.
fn explain_procs(
    args: &ExplainArgs,
    cfg: &ExplainConfig,
    graph: &Graph,
    model: &GcnModel,
) -> anyhow::Result<()> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let exe = std::env::current_exe()?;
    let passthrough: Vec<_> = std::env::args_os().skip(1).collect();
    let mut children: Vec<Child> = Vec::new();
    for rank in 1..cfg.workers {
        let child = Command::new(&exe)
            .args(&passthrough)
            .env(ENV_RANK, rank.to_string())
            .env(ENV_WORLD, cfg.workers.to_string())
            .env(ENV_COORD, addr.to_string())
            .spawn()
            .with_context(|| format!("spawning worker rank {rank}"))?;
        children.push(child);
    }
    let outcome = SocketComm::coordinator(listener, cfg.workers, cfg.reduce_order, cfg.timeout)
        .and_then(|mut comm| explain_collective(&mut comm, model, graph, cfg));
    if outcome.is_err() {
        for c in &mut children {
            let _ = c.kill();
        }
    }
    let mut failed = Vec::new();
    for (i, mut c) in children.into_iter().enumerate() {
        let status = c.wait()?;
        if !status.success() {
            failed.push((i + 1, status));
        }
    }
    let doc = outcome?.expect("rank 0 returns the document");
    if let Some((rank, status)) = failed.first() {
        anyhow::bail!(Error::Protocol {
            rank: *rank,
            reason: format!("worker exited with {status}"),
        });
    }
    write_document(&doc, args)
}

/// Entry point of a spawned rank.
fn explain_worker(cfg: &ExplainConfig, graph: &Graph, model: &GcnModel) -> anyhow::Result<()> {
    let mut comm = SocketComm::from_env(cfg.reduce_order, cfg.timeout)?;
    explain_collective(&mut comm, model, graph, cfg)?;
    info!("rank {} done", comm.rank());
    Ok(())
}

fn cmd_explain(args: &ExplainArgs) -> anyhow::Result<()> {
    let cfg = explain_config(args)?;
    let (graph, model) = load_inputs(&args.inputs)?;
    if std::env::var_os(ENV_RANK).is_some() {
        return explain_worker(&cfg, &graph, &model);
    }
    match cfg.backend {
        Backend::Procs if cfg.workers > 1 => explain_procs(args, &cfg, &graph, &model),
        _ => write_document(&explain_threads(&model, &graph, &cfg)?, args),
    }
}

fn parse_ids(s: &str) -> anyhow::Result<Vec<usize>> {
    match s.parse::<NodeSelection>()? {
        NodeSelection::Ids(ids) => Ok(ids),
        _ => anyhow::bail!(Error::Format("expected comma-separated node ids".into())),
    }
}

fn cmd_oracle(args: &OracleArgs) -> anyhow::Result<()> {
    let (graph, model) = load_inputs(&args.inputs)?;
    let records = parse_ids(&args.nodes)?
        .into_iter()
        .map(|v| oracle_node(&model, &graph, v))
        .collect::<shapflow::Result<Vec<_>>>()?;
    save_oracle_records(&records, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        kind: match args.kind {
            KindArg::PlantedMotif => SyntheticKind::PlantedMotif,
            KindArg::Random => SyntheticKind::Random,
        },
        nodes: args.nodes,
        avg_degree: args.avg_degree,
        feature_dim: args.features,
        classes: args.classes,
        hidden: args.hidden,
        layers: args.layers,
        seed: args.seed,
    };
    let data = generate(&spec)?;
    data.save(&args.graph, &args.model)?;
    info!(
        "wrote {} nodes / {} edges to {}",
        data.graph.num_nodes(),
        data.graph.num_undirected_edges(),
        args.graph.display()
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> anyhow::Result<()> {
    let (graph, model) = load_inputs(&args.inputs)?;
    let sweep = BenchSweep {
        workers: args.workers.clone(),
        samples: args.samples.clone(),
        batch_sizes: args.batch_size.clone(),
        seed: args.seed,
        options: CglsOptions {
            tol: args.tol,
            max_iter: args.max_iter,
        },
        force_sampled: args.force_sampled,
    };
    let rows = run_bench(&model, &graph, args.node, &sweep)?;
    match &args.out {
        Some(path) => write_csv(&rows, File::create(path)?)?,
        None => write_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_fidelity(args: &FidelityArgs) -> anyhow::Result<()> {
    let (graph, model) = load_inputs(&args.inputs)?;
    let mut doc = ExplanationDocument::load(&args.doc)?;
    if let Some(&s) = args.sparsity.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        anyhow::bail!(Error::Domain(format!("sparsity {s} outside [0, 1]")));
    }
    rescore(
        &mut doc,
        &model,
        &graph,
        &args.top_k,
        &args.sparsity,
        args.baseline_trials,
    )?;
    doc.save(&args.out)?;
    Ok(())
}

/// Joins the cause chain, skipping causes whose text the previous message
/// already embeds.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(e) => match e.kind() {
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Numerical => EXIT_NUMERICAL,
            ErrorKind::Runtime => EXIT_RUNTIME,
        },
        None => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Cmd::Explain(a) => cmd_explain(a),
        Cmd::Oracle(a) => cmd_oracle(a),
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Fidelity(a) => cmd_fidelity(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
