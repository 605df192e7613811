#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shapflow::gnn::{DenseLayer, GcnModel};
use shapflow::graph::{ComputationalGraph, Graph};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_model(rng: &mut ChaCha8Rng, dims: &[usize]) -> GcnModel {
    let layers = dims
        .windows(2)
        .map(|w| DenseLayer {
            d_in: w[0],
            d_out: w[1],
            weight: (0..w[0] * w[1])
                .map(|_| rng.random_range(-1.0..1.0f32))
                .collect(),
            bias: (0..w[1]).map(|_| rng.random_range(-0.1..0.1f32)).collect(),
        })
        .collect();
    GcnModel::new(layers).unwrap()
}

pub fn random_graph(rng: &mut ChaCha8Rng, nodes: usize, edges: usize, d: usize) -> Graph {
    let list: Vec<(usize, usize)> = (0..edges)
        .map(|_| (rng.random_range(0..nodes), rng.random_range(0..nodes)))
        .collect();
    let feats = (0..nodes * d)
        .map(|_| rng.random_range(-1.0..1.0f32))
        .collect();
    Graph::from_edges(nodes, &list, d, feats, None).unwrap()
}

pub struct Instance {
    pub graph: Graph,
    pub model: GcnModel,
    pub node: usize,
    pub cg: ComputationalGraph,
}

/// Random graph plus 2-layer GCN whose node 0 has between `lo` and `hi`
/// players in its 2-hop computational graph.
pub fn random_instance(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Instance {
    let d = 4;
    loop {
        let nodes = rng.random_range(4..(hi + 4).min(16));
        let edges = rng.random_range(nodes..3 * nodes);
        let graph = random_graph(rng, nodes, edges, d);
        let cg = graph.extract_computational_graph(0, 2).unwrap();
        let n = cg.num_players();
        if n < lo || n > hi {
            continue;
        }
        let model = random_model(rng, &[d, 8, 3]);
        return Instance {
            graph,
            model,
            node: 0,
            cg,
        };
    }
}

pub fn bfs_distances(graph: &Graph, source: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; graph.num_nodes()];
    dist[source] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        for &w in graph.neighbors(u) {
            let w = w as usize;
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
    }
    dist
}

/// Target-node class probabilities computed densely in f64 on a graph built
/// from scratch: the computational graph's node set, with every original edge
/// among those nodes except the ones masked out.
pub fn deleted_edge_probabilities(
    graph: &Graph,
    model: &GcnModel,
    cg: &ComputationalGraph,
    mask: &[u8],
) -> Vec<f64> {
    let nodes = cg.local_to_global();
    let index: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let removed: BTreeSet<(usize, usize)> = cg
        .global_players()
        .into_iter()
        .zip(mask)
        .filter(|(_, &m)| m == 0)
        .map(|((u, v), _)| (u.min(v), u.max(v)))
        .collect();
    let nv = nodes.len();
    let mut adj = vec![vec![0.0f64; nv]; nv];
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for (u, v) in graph.undirected_edges() {
        if removed.contains(&(u.min(v), u.max(v))) {
            continue;
        }
        if let (Some(&a), Some(&b)) = (index.get(&u), index.get(&v)) {
            adj[a][b] = 1.0;
            adj[b][a] = 1.0;
        }
    }
    let deg: Vec<f64> = adj.iter().map(|r| r.iter().sum()).collect();
    let mut h: Vec<Vec<f64>> = nodes
        .iter()
        .map(|&g| graph.features(g).iter().map(|&x| x as f64).collect())
        .collect();
    let last = model.layers.len() - 1;
    for (l, layer) in model.layers.iter().enumerate() {
        let xw: Vec<Vec<f64>> = h
            .iter()
            .map(|row| {
                (0..layer.d_out)
                    .map(|j| {
                        (0..layer.d_in)
                            .map(|i| row[i] * layer.weight[i * layer.d_out + j] as f64)
                            .sum()
                    })
                    .collect()
            })
            .collect();
        h = (0..nv)
            .map(|a| {
                (0..layer.d_out)
                    .map(|j| {
                        let mut z = layer.bias[j] as f64;
                        for b in 0..nv {
                            if adj[a][b] != 0.0 {
                                z += xw[b][j] / (deg[a] * deg[b]).sqrt();
                            }
                        }
                        if l != last && z < 0.0 {
                            0.0
                        } else {
                            z
                        }
                    })
                    .collect()
            })
            .collect();
    }
    let logits = &h[cg.target_local()];
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.iter().map(|e| e / total).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}
