//! GCN inference on masked computational graphs.
//!
//! Each coalition is evaluated as a genuine subgraph: the adjacency is
//! re-normalized as `D^-1/2 (A + I) D^-1/2` with only the unmasked players
//! kept. Batches stack `batch_size` copies of the computational graph along a
//! block diagonal and run every layer as one sparse-times-dense pass over the
//! stacked system. Rows of a block only ever touch their own block, so a
//! sample's result does not depend on which batch it lands in.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ComputationalGraph;

pub const DEFAULT_BATCH_SIZE: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    #[serde(rename = "in")]
    pub d_in: usize,
    #[serde(rename = "out")]
    pub d_out: usize,
    /// Row-major `d_in x d_out`.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnModel {
    pub layers: Vec<DenseLayer>,
    pub hidden_activation: String,
}

impl GcnModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let model = GcnModel {
            layers,
            hidden_activation: "relu".into(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Format("model has no layers".into()));
        }
        if self.hidden_activation != "relu" {
            return Err(Error::Format(format!(
                "unsupported hidden activation '{}'",
                self.hidden_activation
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.len() != l.d_in * l.d_out || l.bias.len() != l.d_out {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i}: weight has {} values, bias {} for {}x{}",
                    l.weight.len(),
                    l.bias.len(),
                    l.d_in,
                    l.d_out
                )));
            }
            if l.d_in == 0 || l.d_out == 0 {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} has a zero dimension"
                )));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].d_out != pair[1].d_in {
                return Err(Error::DimensionMismatch(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].d_out,
                    i + 1,
                    pair[1].d_in
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.d_out).unwrap_or(0)
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GcnModel> {
    let text = fs::read_to_string(path)?;
    let model: GcnModel = serde_json::from_str(&text)?;
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &GcnModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(model)?)?;
    Ok(())
}

/// Square sparse matrix in compressed row form.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub dim: usize,
    pub offsets: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f32>,
}

impl CsrMatrix {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        let span = self.offsets[row]..self.offsets[row + 1];
        match self.cols[span.clone()].binary_search(&(col as u32)) {
            Ok(i) => self.vals[span.start + i],
            Err(_) => 0.0,
        }
    }
}

/// Appends one normalized block for `mask` to the given buffers. Column
/// indices are block-local; row offsets continue from the current length.
fn push_normalized_block(
    cg: &ComputationalGraph,
    mask: &[u8],
    inv_sqrt_deg: &mut Vec<f64>,
    offsets: &mut Vec<usize>,
    cols: &mut Vec<u32>,
    vals: &mut Vec<f32>,
) {
    let nv = cg.num_nodes();
    inv_sqrt_deg.clear();
    for u in 0..nv {
        let active = cg
            .neighbor_players(u)
            .iter()
            .filter(|&&p| mask[p as usize] != 0)
            .count();
        inv_sqrt_deg.push(1.0 / ((active + 1) as f64).sqrt());
    }
    for u in 0..nv {
        let du = inv_sqrt_deg[u];
        let mut self_done = false;
        for (&v, &p) in cg.neighbors(u).iter().zip(cg.neighbor_players(u)) {
            if !self_done && v as usize > u {
                cols.push(u as u32);
                vals.push((du * du) as f32);
                self_done = true;
            }
            if mask[p as usize] != 0 {
                cols.push(v);
                vals.push((du * inv_sqrt_deg[v as usize]) as f32);
            }
        }
        if !self_done {
            cols.push(u as u32);
            vals.push((du * du) as f32);
        }
        offsets.push(cols.len());
    }
}

/// `D^-1/2 (A_mask + I) D^-1/2` for the computational graph.
pub fn normalize_adjacency(cg: &ComputationalGraph, mask: &[u8]) -> Result<CsrMatrix> {
    check_mask(cg, mask)?;
    let mut offsets = vec![0];
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    push_normalized_block(
        cg,
        mask,
        &mut Vec::new(),
        &mut offsets,
        &mut cols,
        &mut vals,
    );
    Ok(CsrMatrix {
        dim: cg.num_nodes(),
        offsets,
        cols,
        vals,
    })
}

fn check_mask(cg: &ComputationalGraph, mask: &[u8]) -> Result<()> {
    if mask.len() != cg.num_players() {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} entries for {} players",
            mask.len(),
            cg.num_players()
        )));
    }
    Ok(())
}

/// `out[r] += h[r] * W` for every row of `h`.
fn dense_matmul(h: &[f32], w: &[f32], d_in: usize, d_out: usize, out: &mut Vec<f32>) {
    let rows = h.len() / d_in;
    out.clear();
    out.resize(rows * d_out, 0.0);
    for (hrow, orow) in h.chunks_exact(d_in).zip(out.chunks_exact_mut(d_out)) {
        for (&x, wrow) in hrow.iter().zip(w.chunks_exact(d_out)) {
            if x == 0.0 {
                continue;
            }
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += x * wv;
            }
        }
    }
}

/// A model bound to one computational graph, with the first-layer feature
/// transform `X W_1` computed once since it does not depend on the mask.
#[derive(Debug)]
pub struct Predictor<'a> {
    model: &'a GcnModel,
    cg: &'a ComputationalGraph,
    projected: Vec<f32>,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a GcnModel, cg: &'a ComputationalGraph) -> Result<Self> {
        if model.num_layers() != cg.hops() {
            return Err(Error::DimensionMismatch(format!(
                "model has {} layers but the computational graph spans {} hops",
                model.num_layers(),
                cg.hops()
            )));
        }
        if model.input_dim() != cg.feature_dim() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} input features, graph has {}",
                model.input_dim(),
                cg.feature_dim()
            )));
        }
        let first = &model.layers[0];
        let mut projected = Vec::new();
        dense_matmul(
            cg.features(),
            &first.weight,
            first.d_in,
            first.d_out,
            &mut projected,
        );
        Ok(Predictor {
            model,
            cg,
            projected,
        })
    }

    pub fn num_players(&self) -> usize {
        self.cg.num_players()
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    /// Class logits of the target node for each mask row in `masks`.
    fn target_logits(&self, masks: &[u8]) -> Vec<f32> {
        let n = self.cg.num_players();
        let nv = self.cg.num_nodes();
        let blocks = masks.len().checked_div(n).unwrap_or(1);
        let empty: [u8; 0] = [];

        let mut offsets = Vec::with_capacity(blocks * nv + 1);
        offsets.push(0);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut scratch = Vec::with_capacity(nv);
        for b in 0..blocks {
            let mask = if n == 0 {
                &empty[..]
            } else {
                &masks[b * n..(b + 1) * n]
            };
            push_normalized_block(
                self.cg,
                mask,
                &mut scratch,
                &mut offsets,
                &mut cols,
                &mut vals,
            );
        }

        let mut hidden: Vec<f32> = Vec::new();
        let mut transformed: Vec<f32> = Vec::new();
        let last = self.model.num_layers() - 1;
        for (l, layer) in self.model.layers.iter().enumerate() {
            // The first layer reads the shared projection for every block.
            let (operand, shared): (&[f32], bool) = if l == 0 {
                (&self.projected, true)
            } else {
                dense_matmul(
                    &hidden,
                    &layer.weight,
                    layer.d_in,
                    layer.d_out,
                    &mut transformed,
                );
                (&transformed, false)
            };
            let width = layer.d_out;
            let mut out = vec![0.0f32; blocks * nv * width];
            for row in 0..blocks * nv {
                let base = if shared { 0 } else { (row / nv) * nv };
                let orow = &mut out[row * width..(row + 1) * width];
                for e in offsets[row]..offsets[row + 1] {
                    let a = vals[e];
                    let src = (base + cols[e] as usize) * width;
                    for (o, &x) in orow.iter_mut().zip(&operand[src..src + width]) {
                        *o += a * x;
                    }
                }
                for (o, &b) in orow.iter_mut().zip(&layer.bias) {
                    *o += b;
                    if l != last && *o < 0.0 {
                        *o = 0.0;
                    }
                }
            }
            hidden = out;
        }

        let c = self.model.num_classes();
        let target = self.cg.target_local();
        (0..blocks)
            .flat_map(|b| {
                let row = b * nv + target;
                hidden[row * c..(row + 1) * c].to_vec()
            })
            .collect()
    }

    /// Softmax class distribution of the target under `mask`.
    pub fn class_probabilities(&self, mask: &[u8]) -> Result<Vec<f32>> {
        check_mask(self.cg, mask)?;
        Ok(softmax(&self.target_logits(mask)))
    }

    /// Argmax class on the unmasked computational graph.
    pub fn predicted_class(&self) -> usize {
        let probs = softmax(&self.target_logits(&vec![1u8; self.cg.num_players()]));
        probs
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
            .0
    }

    pub fn predict(&self, mask: &[u8], class: usize) -> Result<f32> {
        check_mask(self.cg, mask)?;
        self.check_class(class)?;
        Ok(softmax(&self.target_logits(mask))[class])
    }

    /// Evaluates every row of the flat `k_local x n` mask block, stacking
    /// `batch_size` masked copies of the graph per pass.
    pub fn predict_batched(
        &self,
        masks: &[u8],
        class: usize,
        batch_size: usize,
    ) -> Result<Vec<f32>> {
        self.check_class(class)?;
        if batch_size == 0 {
            return Err(Error::Domain("batch size must be at least 1".into()));
        }
        let n = self.cg.num_players();
        if n == 0 {
            return Ok(Vec::new());
        }
        if !masks.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch(format!(
                "mask block of {} bytes is not a multiple of {n} players",
                masks.len()
            )));
        }
        let c = self.model.num_classes();
        let mut values = Vec::with_capacity(masks.len() / n);
        for slab in masks.chunks(batch_size * n) {
            let logits = self.target_logits(slab);
            values.extend(logits.chunks_exact(c).map(|row| softmax(row)[class]));
        }
        Ok(values)
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.model.num_classes() {
            return Err(Error::IndexOutOfRange {
                index: class as u64,
                bound: self.model.num_classes() as u64,
                context: "class index",
            });
        }
        Ok(())
    }
}

fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = logits.iter().map(|&x| (x as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

pub fn predict(
    model: &GcnModel,
    cg: &ComputationalGraph,
    mask: &[u8],
    class: usize,
) -> Result<f32> {
    Predictor::new(model, cg)?.predict(mask, class)
}

pub fn predict_batched(
    model: &GcnModel,
    cg: &ComputationalGraph,
    masks: &[u8],
    class: usize,
    batch_size: usize,
) -> Result<Vec<f32>> {
    Predictor::new(model, cg)?.predict_batched(masks, class, batch_size)
}
