//! Input graphs and L-hop computational subgraphs.
//!
//! Adjacency is kept in compressed sparse row form, stored symmetrically with
//! sorted, duplicate-free rows. A [`ComputationalGraph`] is the ball of radius
//! `hops` around a target node, re-indexed locally in breadth-first discovery
//! order with the target at index 0. Its undirected edges are the players.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const GRAPH_MAGIC: &[u8; 4] = b"SFG1";
const UNLABELED: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    feature_dim: usize,
    features: Vec<f32>,
    labels: Vec<Option<u32>>,
}

impl Graph {
    /// Builds a graph from an undirected edge list. Edges are symmetrized,
    /// duplicates collapsed and self-loops dropped (GCN layers add their own).
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        feature_dim: usize,
        features: Vec<f32>,
        labels: Option<Vec<Option<u32>>>,
    ) -> Result<Self> {
        if features.len() != num_nodes * feature_dim {
            return Err(Error::DimensionMismatch(format!(
                "feature matrix has {} values, expected {} nodes x {} dims",
                features.len(),
                num_nodes,
                feature_dim
            )));
        }
        let labels = labels.unwrap_or_else(|| vec![None; num_nodes]);
        if labels.len() != num_nodes {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} nodes",
                labels.len(),
                num_nodes
            )));
        }

        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            for x in [u, v] {
                if x >= num_nodes {
                    return Err(Error::IndexOutOfRange {
                        index: x as u64,
                        bound: num_nodes as u64,
                        context: "edge list",
                    });
                }
            }
            if u == v {
                continue;
            }
            rows[u].push(v as u32);
            rows[v].push(u as u32);
        }

        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            neighbors.extend_from_slice(&row);
            offsets.push(neighbors.len());
        }

        Ok(Graph {
            num_nodes,
            offsets,
            neighbors,
            feature_dim,
            features,
            labels,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of stored (directed) adjacency entries.
    pub fn num_stored_entries(&self) -> usize {
        self.neighbors.len()
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn neighbors(&self, node: usize) -> &[u32] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn features(&self, node: usize) -> &[f32] {
        &self.features[node * self.feature_dim..(node + 1) * self.feature_dim]
    }

    pub fn feature_matrix(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&(v as u32)).is_ok()
    }

    /// Undirected edges with `u < v`, in lexicographic order.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_undirected_edges());
        for u in 0..self.num_nodes {
            for &v in self.neighbors(u) {
                if (v as usize) > u {
                    out.push((u, v as usize));
                }
            }
        }
        out
    }

    pub fn extract_computational_graph(
        &self,
        target: usize,
        hops: usize,
    ) -> Result<ComputationalGraph> {
        ComputationalGraph::extract(self, target, hops)
    }
}

/// The L-hop neighbourhood of a target node with locally re-indexed nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationalGraph {
    target_global: usize,
    hops: usize,
    local_to_global: Vec<usize>,
    offsets: Vec<usize>,
    neighbors: Vec<u32>,
    /// Player index of each adjacency entry, aligned with `neighbors`.
    entry_player: Vec<u32>,
    players: Vec<(u32, u32)>,
    feature_dim: usize,
    features: Vec<f32>,
}

impl ComputationalGraph {
    fn extract(g: &Graph, target: usize, hops: usize) -> Result<Self> {
        if target >= g.num_nodes {
            return Err(Error::IndexOutOfRange {
                index: target as u64,
                bound: g.num_nodes as u64,
                context: "target node",
            });
        }
        if hops == 0 {
            return Err(Error::Domain("hop count must be at least 1".into()));
        }

        // BFS discovery order; global -> local via a sparse map.
        let mut global_to_local = std::collections::HashMap::new();
        let mut local_to_global = vec![target];
        global_to_local.insert(target, 0u32);
        let mut queue = VecDeque::from([(target, 0usize)]);
        while let Some((u, d)) = queue.pop_front() {
            if d == hops {
                continue;
            }
            for &w in g.neighbors(u) {
                let w = w as usize;
                if let std::collections::hash_map::Entry::Vacant(e) = global_to_local.entry(w) {
                    e.insert(local_to_global.len() as u32);
                    local_to_global.push(w);
                    queue.push_back((w, d + 1));
                }
            }
        }

        let nv = local_to_global.len();
        let mut offsets = Vec::with_capacity(nv + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        let mut row = Vec::new();
        for &u in &local_to_global {
            row.clear();
            row.extend(
                g.neighbors(u)
                    .iter()
                    .filter_map(|w| global_to_local.get(&(*w as usize)).copied()),
            );
            row.sort_unstable();
            neighbors.extend_from_slice(&row);
            offsets.push(neighbors.len());
        }

        let mut players = Vec::with_capacity(neighbors.len() / 2);
        for u in 0..nv {
            for &v in &neighbors[offsets[u]..offsets[u + 1]] {
                if (v as usize) > u {
                    players.push((u as u32, v));
                }
            }
        }
        // Row-major scan already yields lexicographic (u, v) order.
        let entry_player = neighbors
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let u = offsets.partition_point(|&o| o <= idx) - 1;
                let key = if (u as u32) < v {
                    (u as u32, v)
                } else {
                    (v, u as u32)
                };
                players.binary_search(&key).expect("player for every entry") as u32
            })
            .collect();

        let d = g.feature_dim;
        let mut features = Vec::with_capacity(nv * d);
        for &u in &local_to_global {
            features.extend_from_slice(g.features(u));
        }

        Ok(ComputationalGraph {
            target_global: target,
            hops,
            local_to_global,
            offsets,
            neighbors,
            entry_player,
            players,
            feature_dim: d,
            features,
        })
    }

    /// Local index of the target; always 0.
    pub fn target_local(&self) -> usize {
        0
    }

    pub fn target_global(&self) -> usize {
        self.target_global
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn num_nodes(&self) -> usize {
        self.local_to_global.len()
    }

    pub fn num_players(&self) -> usize {
        self.players.len()
    }

    pub fn players(&self) -> &[(u32, u32)] {
        &self.players
    }

    pub fn local_to_global(&self) -> &[usize] {
        &self.local_to_global
    }

    /// Players expressed as global endpoint pairs.
    pub fn global_players(&self) -> Vec<(usize, usize)> {
        self.players
            .iter()
            .map(|&(u, v)| {
                (
                    self.local_to_global[u as usize],
                    self.local_to_global[v as usize],
                )
            })
            .collect()
    }

    pub fn neighbors(&self, local: usize) -> &[u32] {
        &self.neighbors[self.offsets[local]..self.offsets[local + 1]]
    }

    /// Player indices aligned with [`Self::neighbors`].
    pub fn neighbor_players(&self, local: usize) -> &[u32] {
        &self.entry_player[self.offsets[local]..self.offsets[local + 1]]
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }
}

/// Loads a graph, choosing the reader by extension: `.txt`/`.edges` select
/// the plain-text edge list (features in a sidecar `.csv`), anything else the
/// binary format.
pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("txt") | Some("edges") => load_edge_list(path),
        _ => {
            let mut reader = BufReader::new(File::open(path)?);
            read_binary(&mut reader)
        }
    }
}

pub fn save_graph(graph: &Graph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_binary(graph, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_binary<W: Write>(g: &Graph, w: &mut W) -> Result<()> {
    w.write_all(GRAPH_MAGIC)?;
    w.write_all(&(g.num_nodes as u64).to_le_bytes())?;
    w.write_all(&(g.num_undirected_edges() as u64).to_le_bytes())?;
    w.write_all(&(g.feature_dim as u64).to_le_bytes())?;
    for (u, v) in g.undirected_edges() {
        w.write_all(&(u as u64).to_le_bytes())?;
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for x in &g.features {
        w.write_all(&x.to_le_bytes())?;
    }
    for l in &g.labels {
        w.write_all(&l.unwrap_or(UNLABELED).to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format(format!("truncated graph file reading {what}")))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_binary<R: Read>(r: &mut R) -> Result<Graph> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("graph file shorter than header".into()))?;
    if &magic != GRAPH_MAGIC {
        return Err(Error::Format(format!("bad graph magic {magic:?}")));
    }
    let num_nodes = read_u64(r, "num_nodes")? as usize;
    let num_edges = read_u64(r, "num_undirected_edges")? as usize;
    let dim = read_u64(r, "feature_dim")? as usize;

    let mut edges = Vec::with_capacity(num_edges.min(1 << 24));
    for _ in 0..num_edges {
        let u = read_u64(r, "edge")?;
        let v = read_u64(r, "edge")?;
        for x in [u, v] {
            if x >= num_nodes as u64 {
                return Err(Error::IndexOutOfRange {
                    index: x,
                    bound: num_nodes as u64,
                    context: "edge list",
                });
            }
        }
        edges.push((u as usize, v as usize));
    }

    let mut raw = vec![0u8; num_nodes * dim * 4];
    r.read_exact(&mut raw).map_err(|_| {
        Error::DimensionMismatch(format!(
            "feature block shorter than {num_nodes} x {dim} f32 values"
        ))
    })?;
    let features = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut raw = vec![0u8; num_nodes * 4];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format("label block truncated".into()))?;
    let labels = raw
        .chunks_exact(4)
        .map(|c| {
            let l = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            (l != UNLABELED).then_some(l)
        })
        .collect();

    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} trailing bytes after label block",
            rest.len()
        )));
    }

    Graph::from_edges(num_nodes, &edges, dim, features, Some(labels))
}

/// Sidecar path for a text edge list: `graph.edges` -> `graph.csv`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("csv")
}

fn load_edge_list(path: &Path) -> Result<Graph> {
    let side = sidecar_path(path);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(&side)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.is_empty() {
            return Err(Error::Format(format!(
                "{}: empty row {row}",
                side.display()
            )));
        }
        let label =
            match rec[0].trim() {
                "" | "-1" => None,
                s => Some(s.parse::<u32>().map_err(|e| {
                    Error::Format(format!("{}: row {row} label: {e}", side.display()))
                })?),
            };
        let d = rec.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::DimensionMismatch(format!(
                    "{}: row {row} has {d} features, expected {prev}",
                    side.display()
                )))
            }
            _ => {}
        }
        for field in rec.iter().skip(1) {
            features.push(
                field
                    .parse::<f32>()
                    .map_err(|e| Error::Format(format!("{}: row {row}: {e}", side.display())))?,
            );
        }
        labels.push(label);
    }
    let num_nodes = labels.len();

    let reader = BufReader::new(File::open(path)?);
    let mut edges = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.ok_or_else(|| Error::Format(format!("line {}: expected 'u v'", lineno + 1)))?
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 1)))
        };
        let u = parse(it.next())?;
        let v = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::Format(format!(
                "line {}: trailing tokens",
                lineno + 1
            )));
        }
        edges.push((u, v));
    }

    Graph::from_edges(num_nodes, &edges, dim.unwrap_or(0), features, Some(labels))
}
