//! End-to-end explanation of node predictions.
//!
//! Every rank runs the same per-node sequence: extract the computational
//! graph, plan coalition sizes, generate its share of the masks, predict
//! them in batches, assemble its slab of the regression and join the
//! collective CGLS solve. Rank 0 then ranks edges, scores fidelity and
//! collects the document.

use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::comm::{run_threads, Communicator, ReduceOrder};
use crate::document::{ExplanationDocument, NodeExplanation, RunSettings, SkippedNode, Timings};
use crate::error::{Error, Result};
use crate::fidelity::{self, DEFAULT_BASELINE_TRIALS};
use crate::gnn::{GcnModel, Predictor, DEFAULT_BATCH_SIZE};
use crate::graph::{ComputationalGraph, Graph};
use crate::oracle::exact_shapley_gnn;
use crate::sampler::{generate_masks, plan_sizes, SizePlan};
use crate::solver::{
    assemble_problem, default_constraint_weight, rank_edges, solve_cgls, CglsOptions,
    ShapleyVector, WlsProblem, DEFAULT_TOL,
};

pub const DEFAULT_PLAYER_CAP: usize = 200_000;
const LARGE_GRAPH_PLAYERS: usize = 5_000;
const SMALL_GRAPH_SAMPLES: usize = 60_000;
const LARGE_GRAPH_SAMPLES: usize = 600_000;

/// Sample budget used when none is configured.
pub fn default_samples(num_players: usize) -> usize {
    if num_players < LARGE_GRAPH_PLAYERS {
        SMALL_GRAPH_SAMPLES
    } else {
        LARGE_GRAPH_SAMPLES
    }
}

/// Which nodes to explain.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeSelection {
    Ids(Vec<usize>),
    /// Up to `count` nodes whose computational graph has between `lo` and
    /// `hi` edges (inclusive), drawn by a seeded shuffle and listed in
    /// ascending id order.
    DegreeRange {
        lo: usize,
        hi: usize,
        count: usize,
    },
}

impl FromStr for NodeSelection {
    type Err = Error;

    /// Parses `"3,17,42"` or `"degree-range:[lo,hi]:count"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("invalid node selection '{s}'"));
        if let Some(rest) = s.strip_prefix("degree-range:") {
            let (range, count) = rest.rsplit_once(':').ok_or_else(bad)?;
            let inner = range
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .ok_or_else(bad)?;
            let (lo, hi) = inner.split_once(',').ok_or_else(bad)?;
            let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
            let (lo, hi, count) = (parse(lo)?, parse(hi)?, parse(count)?);
            if lo > hi {
                return Err(bad());
            }
            return Ok(NodeSelection::DegreeRange { lo, hi, count });
        }
        if s.trim().is_empty() {
            return Ok(NodeSelection::Ids(Vec::new()));
        }
        s.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()
            .map(NodeSelection::Ids)
    }
}

/// Resolves a selection against a graph. Explicit ids are kept in the
/// given order.
pub fn select_nodes(
    graph: &Graph,
    hops: usize,
    selection: &NodeSelection,
    seed: u64,
) -> Result<Vec<usize>> {
    match selection {
        NodeSelection::Ids(ids) => {
            if let Some(&bad) = ids.iter().find(|&&v| v >= graph.num_nodes()) {
                return Err(Error::IndexOutOfRange {
                    index: bad as u64,
                    bound: graph.num_nodes() as u64,
                    context: "selected node",
                });
            }
            Ok(ids.clone())
        }
        &NodeSelection::DegreeRange { lo, hi, count } => {
            let mut candidates = Vec::new();
            for v in 0..graph.num_nodes() {
                let n = graph.extract_computational_graph(v, hops)?.num_players();
                if (lo..=hi).contains(&n) {
                    candidates.push(v);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            candidates.shuffle(&mut rng);
            candidates.truncate(count);
            candidates.sort_unstable();
            Ok(candidates)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Threads,
    Procs,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threads" => Ok(Backend::Threads),
            "procs" => Ok(Backend::Procs),
            _ => Err(Error::Format(format!("unknown backend '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplainConfig {
    pub graph: PathBuf,
    pub model: PathBuf,
    pub nodes: NodeSelection,
    /// `None` picks [`default_samples`] per node.
    pub samples: Option<usize>,
    pub workers: usize,
    pub backend: Backend,
    pub batch_size: usize,
    pub top_k: Vec<usize>,
    pub sparsity: Vec<f64>,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: Option<usize>,
    pub out: PathBuf,
    pub force_sampled: bool,
    pub baseline_trials: usize,
    pub player_cap: usize,
    pub reduce_order: ReduceOrder,
    pub timeout: Duration,
}

impl ExplainConfig {
    pub fn new(graph: PathBuf, model: PathBuf, nodes: NodeSelection, out: PathBuf) -> Self {
        ExplainConfig {
            graph,
            model,
            nodes,
            samples: None,
            workers: 1,
            backend: Backend::Threads,
            batch_size: DEFAULT_BATCH_SIZE,
            top_k: vec![5, 10, 20],
            sparsity: vec![0.3, 0.5, 0.7],
            seed: 0,
            tol: DEFAULT_TOL,
            max_iter: None,
            out,
            force_sampled: false,
            baseline_trials: DEFAULT_BASELINE_TRIALS,
            player_cap: DEFAULT_PLAYER_CAP,
            reduce_order: ReduceOrder::Tree,
            timeout: crate::comm::DEFAULT_TIMEOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.samples {
            if k < 2 || k % 2 != 0 {
                return Err(Error::Domain(format!(
                    "sample count must be even and >= 2, got {k}"
                )));
            }
        }
        if self.workers == 0 {
            return Err(Error::Domain("worker count must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Domain(format!(
                "tolerance must be positive, got {}",
                self.tol
            )));
        }
        if let Some(&s) = self.sparsity.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Domain(format!("sparsity {s} outside [0, 1]")));
        }
        if self.baseline_trials == 0 {
            return Err(Error::Domain("baseline trials must be at least 1".into()));
        }
        Ok(())
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            samples: self.samples,
            seed: self.seed,
            tol: self.tol,
            max_iter: self.max_iter,
            force_sampled: self.force_sampled,
            top_k: self.top_k.clone(),
            sparsity: self.sparsity.clone(),
            baseline_trials: self.baseline_trials,
            player_cap: self.player_cap,
        }
    }

    pub fn solver_options(&self) -> CglsOptions {
        CglsOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476C_E5E9_B869);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-node seed derived from the run seed.
pub fn node_seed(seed: u64, node: usize) -> u64 {
    splitmix64(seed ^ splitmix64(node as u64))
}

fn baseline_seed(seed: u64, node: usize) -> u64 {
    node_seed(seed, node) ^ 0x5EED_F1DE
}

/// Everything about one node that every rank derives identically.
#[derive(Debug, Clone)]
pub struct NodeContext {
    pub cg: ComputationalGraph,
    pub class: usize,
    pub phi0: f64,
    pub full_value: f64,
    /// `None` when there are fewer than two players.
    pub plan: Option<SizePlan>,
    pub seed: u64,
}

pub fn prepare_node(
    model: &GcnModel,
    graph: &Graph,
    node: usize,
    samples: Option<usize>,
    force_sampled: bool,
    seed: u64,
) -> Result<NodeContext> {
    let cg = graph.extract_computational_graph(node, model.num_layers())?;
    let predictor = Predictor::new(model, &cg)?;
    let n = cg.num_players();
    let class = predictor.predicted_class();
    let full_value = predictor.predict(&vec![1; n], class)? as f64;
    let phi0 = predictor.predict(&vec![0; n], class)? as f64;
    let plan = if n >= 2 {
        let plan = plan_sizes(n, samples.unwrap_or_else(|| default_samples(n)))?;
        Some(if force_sampled {
            plan.into_sampled()
        } else {
            plan
        })
    } else {
        None
    };
    Ok(NodeContext {
        cg,
        class,
        phi0,
        full_value,
        plan,
        seed: node_seed(seed, node),
    })
}

/// Rank-local regression slab with the time spent sampling and predicting.
pub fn local_problem(
    model: &GcnModel,
    ctx: &NodeContext,
    rank: usize,
    workers: usize,
    batch_size: usize,
) -> Result<(WlsProblem, Duration, Duration)> {
    let plan = ctx
        .plan
        .as_ref()
        .ok_or_else(|| Error::Domain("no sampling plan for fewer than two players".into()))?;
    let start = Instant::now();
    let masks = generate_masks(plan, rank, workers, ctx.seed)?;
    let sampling = start.elapsed();

    let start = Instant::now();
    let preds =
        Predictor::new(model, &ctx.cg)?.predict_batched(&masks.rows, ctx.class, batch_size)?;
    let prediction = start.elapsed();

    let problem = assemble_problem(
        masks,
        &preds,
        ctx.phi0,
        ctx.full_value,
        workers,
        default_constraint_weight(plan),
    )?;
    Ok((problem, sampling, prediction))
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Outcome of one node on one rank.
pub enum NodeOutcome {
    Explained(Box<NodeExplanation>),
    Skipped(SkippedNode),
    /// Non-root ranks after a successful collective solve.
    Participated,
}

/// Explains one node collectively. Every rank must call this with the same
/// arguments; only rank 0 receives the explanation.
pub fn explain_node<C: Communicator + ?Sized>(
    comm: &mut C,
    model: &GcnModel,
    graph: &Graph,
    node: usize,
    config: &ExplainConfig,
) -> Result<NodeOutcome> {
    let start = Instant::now();
    let ctx = prepare_node(
        model,
        graph,
        node,
        config.samples,
        config.force_sampled,
        config.seed,
    )?;
    let n = ctx.cg.num_players();
    if n > config.player_cap {
        return Ok(NodeOutcome::Skipped(SkippedNode {
            node,
            num_players: n,
            reason: format!("{n} players exceed the cap of {}", config.player_cap),
        }));
    }

    let (shapley, exhaustive, samples, sampling, prediction, solve) = match &ctx.plan {
        Some(plan) => {
            let (problem, sampling, prediction) =
                local_problem(model, &ctx, comm.rank(), comm.size(), config.batch_size)?;
            let t = Instant::now();
            let shapley = solve_cgls(comm, &problem, config.solver_options())?;
            (
                shapley,
                plan.exhaustive,
                plan.total_rows(),
                sampling,
                prediction,
                t.elapsed(),
            )
        }
        None => {
            // Zero or one player: efficiency alone fixes the value.
            let phi = vec![ctx.full_value - ctx.phi0; n];
            let shapley = ShapleyVector {
                phi,
                phi0: ctx.phi0,
                iterations: 0,
                residual_norm: 0.0,
            };
            (
                shapley,
                true,
                0,
                Duration::ZERO,
                Duration::ZERO,
                Duration::ZERO,
            )
        }
    };
    let local = [ms(sampling), ms(prediction), ms(solve), ms(start.elapsed())];
    let gathered = comm.gather_to_root(&local)?;
    if comm.rank() != 0 {
        return Ok(NodeOutcome::Participated);
    }
    let max_of = |i: usize| {
        gathered
            .chunks_exact(4)
            .map(|c| c[i])
            .fold(0.0f64, f64::max)
    };
    let mut timings = Timings {
        sampling_ms: max_of(0),
        prediction_ms: max_of(1),
        solve_ms: max_of(2),
        total_ms: 0.0,
    };

    let top_max = config.top_k.iter().copied().max().unwrap_or(0).min(n);
    let top_edges = rank_edges(&shapley.phi, top_max)?;
    let predictor = Predictor::new(model, &ctx.cg)?;
    let report = fidelity::evaluate(
        &predictor,
        ctx.class,
        node,
        &shapley.phi,
        &config.top_k,
        &config.sparsity,
        baseline_seed(config.seed, node),
        config.baseline_trials,
    )?;
    timings.total_ms = max_of(3).max(ms(start.elapsed()));

    Ok(NodeOutcome::Explained(Box::new(NodeExplanation {
        node,
        hops: ctx.cg.hops(),
        predicted_class: ctx.class,
        full_score: ctx.full_value,
        phi0: ctx.phi0,
        players: ctx.cg.global_players(),
        phi: shapley.phi,
        top_edges,
        exhaustive,
        samples,
        iterations: shapley.iterations,
        residual_norm: shapley.residual_norm,
        fidelity: Some(report),
        timings,
    })))
}

/// Runs the whole node list collectively. Rank 0 returns the document.
pub fn explain_collective<C: Communicator + ?Sized>(
    comm: &mut C,
    model: &GcnModel,
    graph: &Graph,
    config: &ExplainConfig,
) -> Result<Option<ExplanationDocument>> {
    config.validate()?;
    let nodes = select_nodes(graph, model.num_layers(), &config.nodes, config.seed)?;
    let mut doc = ExplanationDocument::new(config.settings());
    if nodes.is_empty() {
        doc.warnings.push("node selection is empty".into());
        log::warn!("node selection is empty; nothing to explain");
    }
    for node in nodes {
        match explain_node(comm, model, graph, node, config).map_err(|e| e.for_node(node))? {
            NodeOutcome::Explained(rec) => doc.nodes.push(*rec),
            NodeOutcome::Skipped(skip) => {
                log::warn!("skipping node {}: {}", skip.node, skip.reason);
                doc.warnings
                    .push(format!("node {} skipped: {}", skip.node, skip.reason));
                doc.skipped.push(skip);
            }
            NodeOutcome::Participated => {}
        }
    }
    Ok((comm.rank() == 0).then_some(doc))
}

/// Runs [`explain_collective`] on `config.workers` in-process ranks.
pub fn explain_threads(
    model: &GcnModel,
    graph: &Graph,
    config: &ExplainConfig,
) -> Result<ExplanationDocument> {
    config.validate()?;
    let mut results = run_threads(
        config.workers,
        config.reduce_order,
        config.timeout,
        |comm| explain_collective(comm, model, graph, config),
    );
    // Report the root's error first; other ranks usually fail as a result.
    let root = results.remove(0)?;
    for r in results {
        r?;
    }
    Ok(root.expect("rank 0 returns the document"))
}

/// Exact values for one node, for validation against the estimator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OracleRecord {
    pub node: usize,
    pub predicted_class: usize,
    pub full_score: f64,
    pub phi0: f64,
    pub players: Vec<(usize, usize)>,
    pub phi: Vec<f64>,
}

pub fn oracle_node(model: &GcnModel, graph: &Graph, node: usize) -> Result<OracleRecord> {
    let run = || -> Result<OracleRecord> {
        let cg = graph.extract_computational_graph(node, model.num_layers())?;
        let exact = exact_shapley_gnn(model, &cg)?;
        Ok(OracleRecord {
            node,
            predicted_class: exact.class,
            full_score: exact.full_value,
            phi0: exact.phi0,
            players: cg.global_players(),
            phi: exact.phi,
        })
    };
    run().map_err(|e| e.for_node(node))
}

pub fn save_oracle_records(
    records: &[OracleRecord],
    path: impl AsRef<std::path::Path>,
) -> Result<()> {
    let mut text = serde_json::to_string_pretty(records)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_oracle_records(path: impl AsRef<std::path::Path>) -> Result<Vec<OracleRecord>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Recomputes the fidelity reports of an existing document.
pub fn rescore(
    doc: &mut ExplanationDocument,
    model: &GcnModel,
    graph: &Graph,
    top_k: &[usize],
    sparsity: &[f64],
    baseline_trials: usize,
) -> Result<()> {
    let run_seed = doc.settings.seed;
    for rec in &mut doc.nodes {
        let node = rec.node;
        let run = |rec: &mut NodeExplanation| -> Result<()> {
            let cg = graph.extract_computational_graph(node, model.num_layers())?;
            if cg.global_players() != rec.players {
                return Err(Error::Format(
                    "document players do not match the graph's computational graph".into(),
                ));
            }
            let predictor = Predictor::new(model, &cg)?;
            let seed = baseline_seed(run_seed, node);
            rec.fidelity = Some(fidelity::evaluate(
                &predictor,
                rec.predicted_class,
                node,
                &rec.phi,
                top_k,
                sparsity,
                seed,
                baseline_trials,
            )?);
            rec.top_edges = rank_edges(
                &rec.phi,
                top_k.iter().copied().max().unwrap_or(0).min(rec.phi.len()),
            )?;
            Ok(())
        };
        run(rec).map_err(|e| e.for_node(node))?;
    }
    doc.settings.top_k = top_k.to_vec();
    doc.settings.sparsity = sparsity.to_vec();
    doc.settings.baseline_trials = baseline_trials;
    Ok(())
}
