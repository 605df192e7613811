//! Synthetic graphs with models built to match them.
//!
//! The planted-motif kind marks a few nodes through feature 0. A node belongs
//! to class 1 exactly when a marked node sits within two hops of it, which is
//! the same as having an edge path of length at most two to a marker. The
//! emitted two-layer GCN propagates the marker channel twice and thresholds
//! it, so it recovers the labels without any training.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gnn::{save_model, DenseLayer, GcnModel, Predictor};
use crate::graph::{save_graph, Graph};

/// Logit gain of the motif detector's class-1 output.
const MOTIF_GAIN: f32 = 100.0;
/// Offset that keeps a zero marker signal on the class-0 side.
const MOTIF_MARGIN: f32 = 1e-3;
/// Bias that keeps classes beyond the first two out of contention.
const SUPPRESSED_BIAS: f32 = -20.0;
const MOTIF_HIDDEN: usize = 4;
const MOTIF_HOPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    PlantedMotif,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub nodes: usize,
    pub avg_degree: f64,
    pub feature_dim: usize,
    pub classes: usize,
    /// Hidden width of the random model; the motif detector fixes its own.
    pub hidden: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            kind: SyntheticKind::PlantedMotif,
            nodes: 200,
            avg_degree: 4.0,
            feature_dim: 8,
            classes: 2,
            hidden: 16,
            layers: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub graph: Graph,
    pub model: GcnModel,
    /// Marker flags for the planted-motif kind; empty otherwise.
    pub markers: Vec<bool>,
}

impl SyntheticData {
    pub fn save(&self, graph_path: impl AsRef<Path>, model_path: impl AsRef<Path>) -> Result<()> {
        save_graph(&self.graph, graph_path)?;
        save_model(&self.model, model_path)
    }
}

fn validate(spec: &SyntheticSpec) -> Result<()> {
    if spec.nodes == 0 || spec.feature_dim == 0 || spec.classes == 0 || spec.layers == 0 {
        return Err(Error::Domain("synthetic sizes must be positive".into()));
    }
    if !(spec.avg_degree >= 0.0 && spec.avg_degree.is_finite()) {
        return Err(Error::Domain(format!(
            "invalid average degree {}",
            spec.avg_degree
        )));
    }
    match spec.kind {
        SyntheticKind::PlantedMotif if spec.classes < 2 => Err(Error::Domain(
            "planted motif needs at least 2 classes".into(),
        )),
        SyntheticKind::PlantedMotif if spec.layers != MOTIF_HOPS => Err(Error::Domain(format!(
            "planted motif detector has exactly {MOTIF_HOPS} layers"
        ))),
        SyntheticKind::Random if spec.hidden == 0 && spec.layers > 1 => {
            Err(Error::Domain("hidden width must be positive".into()))
        }
        _ => Ok(()),
    }
}

/// Uniform random multigraph edges; duplicates and self-loops are dropped on
/// construction, so the realized degree is slightly below the target.
fn random_edges(rng: &mut ChaCha8Rng, nodes: usize, avg_degree: f64) -> Vec<(usize, usize)> {
    let m = (nodes as f64 * avg_degree / 2.0).round() as usize;
    if nodes < 2 {
        return Vec::new();
    }
    (0..m)
        .map(|_| (rng.random_range(0..nodes), rng.random_range(0..nodes)))
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let edges = random_edges(&mut rng, spec.nodes, spec.avg_degree);
    match spec.kind {
        SyntheticKind::PlantedMotif => planted_motif(spec, &mut rng, &edges),
        SyntheticKind::Random => random_instance(spec, &mut rng, &edges),
    }
}

fn planted_motif(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    edges: &[(usize, usize)],
) -> Result<SyntheticData> {
    let (n, d) = (spec.nodes, spec.feature_dim);
    // Marker rate chosen so about half the nodes see a marker within two
    // hops of an average-degree neighborhood.
    let deg = spec.avg_degree;
    let ball = 1.0 + deg + deg * deg;
    let rate = 1.0 - 0.5f64.powf(1.0 / ball);
    let markers: Vec<bool> = (0..n).map(|_| rng.random_bool(rate)).collect();

    let mut features = vec![0f32; n * d];
    for v in 0..n {
        features[v * d] = if markers[v] { 1.0 } else { 0.0 };
        for j in 1..d {
            features[v * d + j] = rng.random::<f32>();
        }
    }

    let unlabeled = Graph::from_edges(n, edges, d, features.clone(), None)?;
    let near = within_hops(&unlabeled, &markers, MOTIF_HOPS);
    let labels = near.iter().map(|&b| Some(b as u32)).collect();
    let graph = Graph::from_edges(n, edges, d, features, Some(labels))?;
    Ok(SyntheticData {
        graph,
        model: motif_detector(d, spec.classes)?,
        markers,
    })
}

/// Nodes with a marked node at distance `<= hops`.
fn within_hops(g: &Graph, markers: &[bool], hops: usize) -> Vec<bool> {
    let mut dist = vec![usize::MAX; g.num_nodes()];
    let mut queue = VecDeque::new();
    for (v, &m) in markers.iter().enumerate() {
        if m {
            dist[v] = 0;
            queue.push_back(v);
        }
    }
    while let Some(u) = queue.pop_front() {
        if dist[u] == hops {
            continue;
        }
        for &w in g.neighbors(u) {
            let w = w as usize;
            if dist[w] == usize::MAX {
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
    }
    dist.iter().map(|&x| x <= hops).collect()
}

/// Layer 1 copies the marker feature into hidden channel 0; layer 2 turns the
/// twice-propagated marker mass into the class-1 logit. The signal is zero
/// exactly when no marker is within two hops and otherwise at least
/// `1 / (d_max + 1)^2`, far above the margin.
pub fn motif_detector(feature_dim: usize, classes: usize) -> Result<GcnModel> {
    let mut w1 = vec![0f32; feature_dim * MOTIF_HIDDEN];
    w1[0] = 1.0;
    let mut w2 = vec![0f32; MOTIF_HIDDEN * classes];
    w2[1] = MOTIF_GAIN;
    let mut b2 = vec![SUPPRESSED_BIAS; classes];
    b2[0] = 0.0;
    b2[1] = -MOTIF_MARGIN;
    GcnModel::new(vec![
        DenseLayer {
            d_in: feature_dim,
            d_out: MOTIF_HIDDEN,
            weight: w1,
            bias: vec![0.0; MOTIF_HIDDEN],
        },
        DenseLayer {
            d_in: MOTIF_HIDDEN,
            d_out: classes,
            weight: w2,
            bias: b2,
        },
    ])
}

fn random_instance(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    edges: &[(usize, usize)],
) -> Result<SyntheticData> {
    let (n, d) = (spec.nodes, spec.feature_dim);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let features: Vec<f32> = (0..n * d).map(|_| normal.sample(rng)).collect();
    let labels = (0..n)
        .map(|_| Some(rng.random_range(0..spec.classes) as u32))
        .collect();
    let graph = Graph::from_edges(n, edges, d, features, Some(labels))?;

    let mut dims = vec![d];
    dims.extend(std::iter::repeat_n(spec.hidden, spec.layers - 1));
    dims.push(spec.classes);
    let layers = dims
        .windows(2)
        .map(|w| {
            let scale = 1.0 / (w[0] as f32).sqrt();
            DenseLayer {
                d_in: w[0],
                d_out: w[1],
                weight: (0..w[0] * w[1])
                    .map(|_| normal.sample(rng) * scale)
                    .collect(),
                bias: (0..w[1]).map(|_| normal.sample(rng) * 0.1).collect(),
            }
        })
        .collect();
    Ok(SyntheticData {
        graph,
        model: GcnModel::new(layers)?,
        markers: Vec::new(),
    })
}

/// Fraction of labeled nodes whose full-graph prediction matches the label.
pub fn accuracy(model: &GcnModel, graph: &Graph) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (v, label) in graph.labels().iter().enumerate() {
        let Some(label) = label else { continue };
        let cg = graph.extract_computational_graph(v, model.num_layers())?;
        let predictor = Predictor::new(model, &cg)?;
        total += 1;
        hit += (predictor.predicted_class() == *label as usize) as usize;
    }
    if total == 0 {
        return Err(Error::Domain("graph has no labeled nodes".into()));
    }
    Ok(hit as f64 / total as f64)
}
