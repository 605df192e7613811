//! Timing sweeps over worker count, sample budget and batch size.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::comm::{run_threads, Communicator, ReduceOrder, DEFAULT_TIMEOUT};
use crate::error::{Error, Result};
use crate::gnn::GcnModel;
use crate::graph::Graph;
use crate::pipeline::{local_problem, prepare_node};
use crate::solver::{solve_cgls, CglsOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub p: usize,
    pub k: usize,
    pub batch_size: usize,
    pub sampling_ms: f64,
    pub predict_ms: f64,
    pub solve_ms: f64,
    pub total_ms: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSweep {
    pub workers: Vec<usize>,
    pub samples: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub seed: u64,
    pub options: CglsOptions,
    pub force_sampled: bool,
}

/// Times one full explanation (without fidelity) of `node` for every
/// combination in the sweep, on in-process worker threads. Phases are the
/// maximum over ranks; `total_ms` is wall-clock for the whole collective.
pub fn run_bench(
    model: &GcnModel,
    graph: &Graph,
    node: usize,
    sweep: &BenchSweep,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &p in &sweep.workers {
        for &k in &sweep.samples {
            for &batch in &sweep.batch_sizes {
                rows.push(bench_one(model, graph, node, sweep, p, k, batch)?);
            }
        }
    }
    Ok(rows)
}

fn bench_one(
    model: &GcnModel,
    graph: &Graph,
    node: usize,
    sweep: &BenchSweep,
    p: usize,
    k: usize,
    batch: usize,
) -> Result<BenchRow> {
    if p == 0 || batch == 0 {
        return Err(Error::Domain(
            "worker count and batch size must be positive".into(),
        ));
    }
    let ctx = prepare_node(model, graph, node, Some(k), sweep.force_sampled, sweep.seed)?;
    if ctx.plan.is_none() {
        return Err(Error::Domain(format!(
            "node {node} has fewer than two players"
        )));
    }
    let start = std::time::Instant::now();
    let results = run_threads(
        p,
        ReduceOrder::Tree,
        DEFAULT_TIMEOUT,
        |comm| -> Result<[f64; 4]> {
            let (problem, sampling, prediction) =
                local_problem(model, &ctx, comm.rank(), p, batch)?;
            let t = std::time::Instant::now();
            let shapley = solve_cgls(comm, &problem, sweep.options)?;
            let solve = t.elapsed();
            Ok([
                sampling.as_secs_f64() * 1e3,
                prediction.as_secs_f64() * 1e3,
                solve.as_secs_f64() * 1e3,
                shapley.iterations as f64,
            ])
        },
    );
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    let per_rank = results.into_iter().collect::<Result<Vec<_>>>()?;
    let max_of = |i: usize| per_rank.iter().map(|r| r[i]).fold(0.0f64, f64::max);
    Ok(BenchRow {
        p,
        k: ctx.plan.as_ref().map(|pl| pl.total_rows()).unwrap_or(0),
        batch_size: batch,
        sampling_ms: max_of(0),
        predict_ms: max_of(1),
        solve_ms: max_of(2),
        total_ms,
        iterations: per_rank[0][3] as usize,
    })
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticSpec};

    #[test]
    fn single_config_single_row() {
        let data = generate(&SyntheticSpec {
            nodes: 40,
            seed: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let node = (0..40)
            .find(|&v| {
                data.graph
                    .extract_computational_graph(v, 2)
                    .unwrap()
                    .num_players()
                    >= 4
            })
            .unwrap();
        let sweep = BenchSweep {
            workers: vec![2],
            samples: vec![200],
            batch_sizes: vec![10],
            seed: 1,
            options: CglsOptions::default(),
            force_sampled: true,
        };
        let rows = run_bench(&data.model, &data.graph, node, &sweep).unwrap();
        assert_eq!(rows.len(), 1);
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            "p,k,batch_size,sampling_ms,predict_ms,solve_ms,total_ms,iterations"
        );
        assert_eq!(rows[0].k, 200);
    }
}
