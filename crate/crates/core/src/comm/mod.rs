//! Worker runtime: a fixed set of ranks and the collectives they share.
//!
//! Two interchangeable backends implement [`Communicator`]: worker threads in
//! one process ([`threads`]) and processes talking over local stream sockets
//! ([`socket`]). Both sum with the same fixed tree, so any program built on
//! these collectives produces identical numbers on either backend.

pub mod socket;
pub mod threads;

use std::time::Duration;

use crate::error::Result;

pub use socket::SocketComm;
pub use threads::{run_threads, ThreadComm};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

pub const ENV_RANK: &str = "SHAPFLOW_RANK";
pub const ENV_WORLD: &str = "SHAPFLOW_WORLD";
pub const ENV_COORD: &str = "SHAPFLOW_COORD";

/// How contributions from different ranks are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReduceOrder {
    /// Fixed binary tree over ranks; bitwise reproducible.
    #[default]
    Tree,
    /// Whatever order contributions arrive in.
    Arrival,
}

/// Per-rank counters of issued collectives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CommStats {
    pub scalar_reductions: u64,
    pub vector_reductions: u64,
    pub reduced_values: u64,
    pub barriers: u64,
    pub gathers: u64,
}

impl CommStats {
    pub(crate) fn record_reduce(&mut self, len: usize) {
        if len == 1 {
            self.scalar_reductions += 1;
        } else {
            self.vector_reductions += 1;
        }
        self.reduced_values += len as u64;
    }
}

pub trait Communicator: Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn reduce_order(&self) -> ReduceOrder;

    /// Element-wise sum over ranks, left in `buf` on every rank.
    fn all_reduce_sum(&mut self, buf: &mut [f64]) -> Result<()>;

    fn barrier(&mut self) -> Result<()>;

    /// Rank-ordered concatenation on rank 0; other ranks receive an empty
    /// vector.
    fn gather_to_root(&mut self, buf: &[f64]) -> Result<Vec<f64>>;

    fn stats(&self) -> CommStats;

    fn reset_stats(&mut self);

    fn all_reduce_scalar(&mut self, value: f64) -> Result<f64> {
        let mut buf = [value];
        self.all_reduce_sum(&mut buf)?;
        Ok(buf[0])
    }
}

/// Sums `parts` element-wise with a fixed binary tree: the even-indexed and
/// odd-indexed halves are summed recursively and then added. For `p` a power
/// of two, the subtree of the parts congruent to `r` modulo `p` is exactly
/// what a rank holding those parts computes locally, so partial sums
/// assembled across any power-of-two number of ranks are bitwise identical.
pub fn tree_sum(parts: &[&[f64]]) -> Vec<f64> {
    assert!(!parts.is_empty(), "tree_sum needs at least one part");
    fn rec(parts: &[&[f64]], start: usize, stride: usize) -> Vec<f64> {
        let count = (parts.len() - start).div_ceil(stride);
        if count == 1 {
            return parts[start].to_vec();
        }
        let mut left = rec(parts, start, stride * 2);
        let right = rec(parts, start + stride, stride * 2);
        for (a, b) in left.iter_mut().zip(&right) {
            *a += b;
        }
        left
    }
    rec(parts, 0, 1)
}

/// Sequential left-to-right sum, used for arrival-order reductions.
pub fn flat_sum(parts: &[&[f64]]) -> Vec<f64> {
    let mut out = parts[0].to_vec();
    for p in &parts[1..] {
        for (a, b) in out.iter_mut().zip(p.iter()) {
            *a += b;
        }
    }
    out
}
