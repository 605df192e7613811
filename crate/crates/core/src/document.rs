//! Explanation output documents.
//!
//! The main document is pretty-printed JSON. Shapley vectors can also be
//! written to a binary sidecar (`SFP1`, little-endian): u64 record count,
//! then per record u64 node, u64 n and n f64 values.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fidelity::FidelityReport;

pub const DOCUMENT_VERSION: u32 = 1;
const PHI_MAGIC: &[u8; 4] = b"SFP1";

/// Wall-clock phases in milliseconds, each the maximum over ranks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub sampling_ms: f64,
    pub prediction_ms: f64,
    pub solve_ms: f64,
    pub total_ms: f64,
}

/// Result-affecting settings, recorded so a document can be re-created.
/// Worker count, backend and batch size are left out on purpose: they do
/// not change any value in the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub samples: Option<usize>,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: Option<usize>,
    pub force_sampled: bool,
    pub top_k: Vec<usize>,
    pub sparsity: Vec<f64>,
    pub baseline_trials: usize,
    pub player_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeExplanation {
    pub node: usize,
    pub hops: usize,
    pub predicted_class: usize,
    /// `f(N)`: score of the predicted class on the full computational graph.
    pub full_score: f64,
    /// `f(empty)`.
    pub phi0: f64,
    /// Players as global `(u, v)` endpoint pairs, aligned with `phi`.
    pub players: Vec<(usize, usize)>,
    pub phi: Vec<f64>,
    /// Player indices in decreasing order of `phi`, truncated to the largest
    /// requested `k`.
    pub top_edges: Vec<usize>,
    pub exhaustive: bool,
    /// Mask rows actually evaluated.
    pub samples: usize,
    pub iterations: usize,
    pub residual_norm: f64,
    pub fidelity: Option<FidelityReport>,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedNode {
    pub node: usize,
    pub num_players: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationDocument {
    pub version: u32,
    pub settings: RunSettings,
    pub nodes: Vec<NodeExplanation>,
    pub skipped: Vec<SkippedNode>,
    pub warnings: Vec<String>,
}

impl ExplanationDocument {
    pub fn new(settings: RunSettings) -> Self {
        ExplanationDocument {
            version: DOCUMENT_VERSION,
            settings,
            nodes: Vec::new(),
            skipped: Vec::new(),
            warnings: Vec::new(),
        }
    }

    /// Copy with all timings zeroed, for comparing runs.
    pub fn without_timings(&self) -> Self {
        let mut doc = self.clone();
        for n in &mut doc.nodes {
            n.timings = Timings::default();
        }
        doc
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ExplanationDocument = serde_json::from_str(text)?;
        for n in &doc.nodes {
            if n.players.len() != n.phi.len() {
                return Err(Error::Format(format!(
                    "node {}: {} players but {} Shapley values",
                    n.node,
                    n.players.len(),
                    n.phi.len()
                )));
            }
        }
        Ok(doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn write_phi_sidecar(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(PHI_MAGIC)?;
        w.write_all(&(self.nodes.len() as u64).to_le_bytes())?;
        for n in &self.nodes {
            w.write_all(&(n.node as u64).to_le_bytes())?;
            w.write_all(&(n.phi.len() as u64).to_le_bytes())?;
            for v in &n.phi {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct ByteReader<'a> {
    rest: &'a [u8],
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.rest.len() < len {
            return Err(Error::Format("phi sidecar truncated".into()));
        }
        let (head, rest) = self.rest.split_at(len);
        self.rest = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a sidecar into `(node, phi)` records.
pub fn read_phi_sidecar(path: impl AsRef<Path>) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut r = ByteReader { rest: &bytes };
    if r.take(4)? != PHI_MAGIC {
        return Err(Error::Format("bad phi sidecar magic".into()));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let node = r.u64()? as usize;
        let n = r.u64()? as usize;
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format("phi length overflow".into()))?;
        let phi = r
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((node, phi));
    }
    if !r.rest.is_empty() {
        return Err(Error::Format("trailing bytes in phi sidecar".into()));
    }
    Ok(out)
}
