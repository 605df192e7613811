//! Weighted least squares for Shapley values.
//!
//! The regression `min sum_i w_i (t_i - m_i . phi)^2` with targets
//! `t_i = y_i - phi_0` is solved either by distributed CGLS over a 1D row
//! partition of the mask matrix, or directly through the normal equations on
//! a single rank. Efficiency (`phi_0 + sum phi = f(N)`) enters as one extra
//! heavily weighted all-ones row owned by rank 0.
//!
//! Local sums are split into fixed reduction shards (global pair `g` belongs
//! to shard `g mod V`) and combined with [`tree_sum`]. With `V` a multiple of
//! the power-of-two worker count, the summation tree is the same for every
//! partitioning, so CGLS iterates are bitwise identical across worker counts.

use nalgebra::{DMatrix, DVector};

use crate::comm::{tree_sum, Communicator, ReduceOrder};
use crate::error::{Error, Result};
use crate::sampler::{MaskBlock, SizePlan};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const MAX_DIRECT_PLAYERS: usize = 20_000;
const DEFAULT_REDUCTION_SHARDS: usize = 64;
/// Ratio of the efficiency-row weight to the total sample weight.
pub const CONSTRAINT_WEIGHT_FACTOR: f64 = 1e6;

/// Number of reduction shards for `workers` ranks.
pub fn reduction_shards(workers: usize) -> usize {
    if DEFAULT_REDUCTION_SHARDS.is_multiple_of(workers) {
        DEFAULT_REDUCTION_SHARDS
    } else {
        workers
    }
}

/// Efficiency-row weight for a plan: the factor times the summed weight of
/// all sample rows. Sampled rows carry roughly `1/k` each, so scaling by the
/// largest single row would leave the constraint too soft for large `k`.
pub fn default_constraint_weight(plan: &SizePlan) -> f64 {
    let mass: f64 = (1..plan.n)
        .filter(|&s| plan.row_counts[s] > 0)
        .map(|s| plan.row_counts[s] as f64 * plan.row_weight(s))
        .sum();
    CONSTRAINT_WEIGHT_FACTOR * if mass > 0.0 { mass } else { 1.0 }
}

/// Rank-local slab of the regression.
#[derive(Debug, Clone)]
pub struct WlsProblem {
    pub n: usize,
    /// Flat row-major 0/1 matrix, one row per sample plus the constraint row
    /// on rank 0.
    rows: Vec<u8>,
    weights: Vec<f64>,
    sqrt_weights: Vec<f64>,
    targets: Vec<f64>,
    /// Row indices per hosted reduction shard, in global order.
    shards: Vec<Vec<usize>>,
    pub phi0: f64,
    pub full_value: f64,
    pub constraint_weight: f64,
    pub has_constraint: bool,
}

impl WlsProblem {
    pub fn num_rows(&self) -> usize {
        self.weights.len()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// `q_i = sqrt(w_i) * (m_i . u)` for every local row.
    fn apply(&self, u: &[f64], q: &mut [f64]) {
        for (i, qi) in q.iter_mut().enumerate() {
            *qi = self.sqrt_weights[i] * masked_dot(self.row(i), u);
        }
    }

    /// Per-shard partials of `A^T z` combined with the fixed tree.
    fn apply_transpose(&self, z: &[f64], order: ReduceOrder) -> Vec<f64> {
        let n = self.n;
        let accumulate = |out: &mut [f64], i: usize| {
            let c = self.sqrt_weights[i] * z[i];
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += m as f64 * c;
            }
        };
        match order {
            ReduceOrder::Tree => {
                let partials: Vec<Vec<f64>> = self
                    .shards
                    .iter()
                    .map(|rows| {
                        let mut out = vec![0.0; n];
                        for &i in rows {
                            accumulate(&mut out, i);
                        }
                        out
                    })
                    .collect();
                let refs: Vec<&[f64]> = partials.iter().map(|v| v.as_slice()).collect();
                tree_sum(&refs)
            }
            ReduceOrder::Arrival => {
                let mut out = vec![0.0; n];
                for i in 0..self.num_rows() {
                    accumulate(&mut out, i);
                }
                out
            }
        }
    }

    fn squared_norm(&self, q: &[f64], order: ReduceOrder) -> f64 {
        match order {
            ReduceOrder::Tree => {
                let partials: Vec<[f64; 1]> = self
                    .shards
                    .iter()
                    .map(|rows| [rows.iter().map(|&i| q[i] * q[i]).sum()])
                    .collect();
                let refs: Vec<&[f64]> = partials.iter().map(|v| v.as_slice()).collect();
                tree_sum(&refs)[0]
            }
            ReduceOrder::Arrival => q.iter().map(|x| x * x).sum(),
        }
    }
}

/// Builds the local regression from a mask block and its predictions.
pub fn assemble_problem(
    masks: MaskBlock,
    preds: &[f32],
    phi0: f64,
    full_value: f64,
    workers: usize,
    constraint_weight: f64,
) -> Result<WlsProblem> {
    let k_local = masks.num_rows();
    if preds.len() != k_local {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} mask rows",
            preds.len(),
            k_local
        )));
    }
    if masks.pair_ids.len() * 2 != k_local {
        return Err(Error::DimensionMismatch(
            "mask rows are not complementary pairs".into(),
        ));
    }
    let n = masks.n;
    let rank = masks.rank;
    let shards_total = reduction_shards(workers);
    let hosted: Vec<usize> = (rank..shards_total).step_by(workers).collect();
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); hosted.len()];
    for (j, &g) in masks.pair_ids.iter().enumerate() {
        let shard = (g % shards_total as u64) as usize;
        let slot = (shard - rank) / workers;
        shards[slot].extend([2 * j, 2 * j + 1]);
    }

    let mut rows = masks.rows;
    let mut weights = masks.weights;
    let mut targets: Vec<f64> = preds.iter().map(|&y| y as f64 - phi0).collect();
    let has_constraint = rank == 0;
    if has_constraint {
        rows.extend(std::iter::repeat_n(1u8, n));
        weights.push(constraint_weight);
        targets.push(full_value - phi0);
        shards[0].push(k_local);
    }
    if let Some(bad) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::Domain(format!(
            "row weight {bad} is not strictly positive"
        )));
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Domain("non-finite regression target".into()));
    }
    let sqrt_weights = weights.iter().map(|w| w.sqrt()).collect();

    Ok(WlsProblem {
        n,
        rows,
        weights,
        sqrt_weights,
        targets,
        shards,
        phi0,
        full_value,
        constraint_weight,
        has_constraint,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyVector {
    pub phi: Vec<f64>,
    pub phi0: f64,
    pub iterations: usize,
    /// CGLS: normal-equation residual `||A^T (b - A x)||`; direct: the
    /// weighted residual `||b - A x||`.
    pub residual_norm: f64,
}

impl ShapleyVector {
    /// `phi_0 + sum phi`.
    pub fn reconstructed_value(&self) -> f64 {
        self.phi0 + self.phi.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CglsOptions {
    pub tol: f64,
    /// `None` selects `min(max(2n, 32), 5000)`.
    pub max_iter: Option<usize>,
}

impl Default for CglsOptions {
    fn default() -> Self {
        CglsOptions {
            tol: DEFAULT_TOL,
            max_iter: None,
        }
    }
}

/// In exact arithmetic `n` steps suffice, but the heavy constraint row costs
/// several extra steps in floating point, so allow `2n` and at least 32.
pub fn default_max_iter(n: usize) -> usize {
    (2 * n).clamp(32, 5000)
}

pub fn solve_cgls<C: Communicator + ?Sized>(
    comm: &mut C,
    problem: &WlsProblem,
    opts: CglsOptions,
) -> Result<ShapleyVector> {
    solve_cgls_observed(comm, problem, opts, |_, _| {})
}

/// CGLS with a callback receiving `(iteration, x_iteration)` after each
/// update. Collective: every rank must call it with the same `n`.
pub fn solve_cgls_observed<C, F>(
    comm: &mut C,
    problem: &WlsProblem,
    opts: CglsOptions,
    mut observe: F,
) -> Result<ShapleyVector>
where
    C: Communicator + ?Sized,
    F: FnMut(usize, &[f64]),
{
    if !(opts.tol > 0.0) {
        return Err(Error::Domain(format!(
            "tolerance must be positive, got {}",
            opts.tol
        )));
    }
    let n = problem.n;
    let order = comm.reduce_order();
    let max_iter = opts.max_iter.unwrap_or_else(|| default_max_iter(n));
    let k_local = problem.num_rows();

    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = (0..k_local)
        .map(|i| problem.sqrt_weights[i] * problem.targets[i])
        .collect();
    let mut s = problem.apply_transpose(&r, order);
    comm.all_reduce_sum(&mut s)?;
    let norm_s0 = norm(&s);
    // The constraint row adds c (f(N) - phi_0) to every entry of s_0 and
    // would dominate its norm; measure progress against the sample part.
    let reference = if problem.constraint_weight > 0.0 {
        let shift = problem.constraint_weight * (problem.full_value - problem.phi0);
        let sample_part = s
            .iter()
            .map(|v| (v - shift) * (v - shift))
            .sum::<f64>()
            .sqrt();
        if sample_part > 0.0 {
            sample_part
        } else {
            norm_s0
        }
    } else {
        norm_s0
    };
    let mut gamma = norm_s0 * norm_s0;
    let mut u = s.clone();
    let mut q = vec![0.0; k_local];
    let mut iterations = 0;

    if norm_s0 > 0.0 {
        for it in 1..=max_iter {
            problem.apply(&u, &mut q);
            let delta = comm.all_reduce_scalar(problem.squared_norm(&q, order))?;
            if !delta.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    reason: format!("search direction norm {delta}"),
                });
            }
            if delta == 0.0 {
                break;
            }
            let alpha = gamma / delta;
            for (xi, ui) in x.iter_mut().zip(&u) {
                *xi += alpha * ui;
            }
            for (ri, qi) in r.iter_mut().zip(&q) {
                *ri -= alpha * qi;
            }
            s = problem.apply_transpose(&r, order);
            comm.all_reduce_sum(&mut s)?;
            let gamma_next = dot(&s, &s);
            if !gamma_next.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    iteration: it,
                    reason: "non-finite residual".into(),
                });
            }
            iterations = it;
            observe(it, &x);
            let beta = gamma_next / gamma;
            gamma = gamma_next;
            if gamma.sqrt() <= opts.tol * reference {
                break;
            }
            for (ui, si) in u.iter_mut().zip(&s) {
                *ui = si + beta * *ui;
            }
        }
    }

    Ok(ShapleyVector {
        phi: x,
        phi0: problem.phi0,
        iterations,
        residual_norm: gamma.sqrt(),
    })
}

/// Direct solve of the normal equations `(A^T A) phi = A^T b` over problems
/// gathered onto one rank.
pub fn solve_direct(parts: &[&WlsProblem]) -> Result<ShapleyVector> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Domain("no problem slabs to solve".into()))?;
    let n = first.n;
    if n > MAX_DIRECT_PLAYERS {
        return Err(Error::TooLarge(format!(
            "{n} players exceeds the direct-solver limit of {MAX_DIRECT_PLAYERS}"
        )));
    }
    if parts.iter().any(|p| p.n != n) {
        return Err(Error::DimensionMismatch(
            "slabs disagree on player count".into(),
        ));
    }

    let mut gram = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut active = Vec::with_capacity(n);
    for p in parts {
        for i in 0..p.num_rows() {
            let w = p.weights[i];
            active.clear();
            active.extend(
                p.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m != 0)
                    .map(|(j, _)| j),
            );
            for &a in &active {
                rhs[a] += w * p.targets[i];
                for &b in &active {
                    gram[(a, b)] += w;
                }
            }
        }
    }

    let phi = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => {
            // Only retry with a small ridge when the spectrum says the
            // system is full rank and merely lost definiteness to rounding.
            let eig = gram.clone().symmetric_eigen();
            let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let rank = eig
                .eigenvalues
                .iter()
                .filter(|v| v.abs() > max * n as f64 * f64::EPSILON)
                .count();
            if rank < n {
                return Err(Error::Singular { rank, n });
            }
            let jitter = 1e-10 * gram.trace() / n as f64;
            for i in 0..n {
                gram[(i, i)] += jitter;
            }
            gram.cholesky()
                .ok_or(Error::Singular { rank, n })?
                .solve(&rhs)
        }
    };

    let phi: Vec<f64> = phi.iter().copied().collect();
    let mut residual = 0.0;
    for p in parts {
        for i in 0..p.num_rows() {
            let fit: f64 = p.row(i).iter().zip(&phi).map(|(&m, &x)| m as f64 * x).sum();
            residual += p.weights[i] * (p.targets[i] - fit).powi(2);
        }
    }
    Ok(ShapleyVector {
        phi,
        phi0: first.phi0,
        iterations: 0,
        residual_norm: residual.sqrt(),
    })
}

/// Player indices sorted by descending value, ties by ascending index.
pub fn rank_edges(phi: &[f64], top_k: usize) -> Result<Vec<usize>> {
    if top_k > phi.len() {
        return Err(Error::Domain(format!(
            "top_k {top_k} exceeds the {} players",
            phi.len()
        )));
    }
    let mut order: Vec<usize> = (0..phi.len()).collect();
    order.sort_by(|&a, &b| phi[b].total_cmp(&phi[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    Ok(order)
}

/// `m . u` for a 0/1 row, summed in eight fixed lanes so the loop
/// vectorizes while the result stays independent of the worker count.
fn masked_dot(row: &[u8], u: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let rows = row.chunks_exact(LANES);
    let tail: f64 = rows
        .remainder()
        .iter()
        .zip(&u[row.len() - row.len() % LANES..])
        .map(|(&m, &x)| m as f64 * x)
        .sum();
    for (m, x) in rows.zip(u.chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += m[l] as f64 * x[l];
        }
    }
    let pairs = [
        acc[0] + acc[4],
        acc[1] + acc[5],
        acc[2] + acc[6],
        acc[3] + acc[7],
    ];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{run_threads, DEFAULT_TIMEOUT};

    /// A problem whose rows are given directly, bypassing the sampler.
    fn raw_problem(
        n: usize,
        rows: Vec<Vec<u8>>,
        weights: Vec<f64>,
        targets: Vec<f64>,
    ) -> WlsProblem {
        let k = rows.len();
        WlsProblem {
            n,
            rows: rows.concat(),
            sqrt_weights: weights.iter().map(|w| w.sqrt()).collect(),
            weights,
            targets,
            shards: vec![(0..k).collect()],
            phi0: 0.0,
            full_value: 0.0,
            constraint_weight: 0.0,
            has_constraint: false,
        }
    }

    fn identity(n: usize, targets: Vec<f64>) -> WlsProblem {
        let rows = (0..n)
            .map(|i| (0..n).map(|j| (i == j) as u8).collect())
            .collect();
        raw_problem(n, rows, vec![1.0; n], targets)
    }

    #[test]
    fn identity_direct_and_cgls() {
        let t = vec![0.3, -1.0, 2.5, 0.0];
        let p = identity(4, t.clone());
        let direct = solve_direct(&[&p]).unwrap();
        assert_eq!(direct.phi, t);
        let out = run_threads(1, ReduceOrder::Tree, DEFAULT_TIMEOUT, |c| {
            solve_cgls(c, &p, CglsOptions::default()).unwrap()
        });
        assert_eq!(out[0].iterations, 1);
        for (a, b) in out[0].phi.iter().zip(&t) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_rows_halved_weights() {
        let rows = vec![vec![1, 0, 1], vec![0, 1, 1], vec![1, 1, 0], vec![1, 0, 0]];
        let w = vec![0.4, 1.3, 0.7, 2.0];
        let t = vec![1.0, -0.5, 0.25, 0.8];
        let base = solve_direct(&[&raw_problem(3, rows.clone(), w.clone(), t.clone())]).unwrap();
        let dup_rows: Vec<Vec<u8>> = rows.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
        let dup_w: Vec<f64> = w.iter().flat_map(|&x| [x / 2.0, x / 2.0]).collect();
        let dup_t: Vec<f64> = t.iter().flat_map(|&x| [x, x]).collect();
        let dup = solve_direct(&[&raw_problem(3, dup_rows, dup_w, dup_t)]).unwrap();
        for (a, b) in base.phi.iter().zip(&dup.phi) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_system_reports_rank() {
        let rows = vec![vec![1, 1, 0], vec![1, 1, 0]];
        let err =
            solve_direct(&[&raw_problem(3, rows, vec![1.0, 1.0], vec![1.0, 2.0])]).unwrap_err();
        assert!(matches!(err, Error::Singular { rank: 1, n: 3 }));
    }

    #[test]
    fn rank_edges_ordering() {
        assert_eq!(rank_edges(&[0.1, 0.5, 0.3], 2).unwrap(), vec![1, 2]);
        assert_eq!(rank_edges(&[0.2; 5], 3).unwrap(), vec![0, 1, 2]);
        let mut all = rank_edges(&[0.3, -1.0, 0.3, 2.0], 4).unwrap();
        assert_eq!(all, vec![3, 0, 2, 1]);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(rank_edges(&[1.0], 2).is_err());
    }

    #[test]
    fn non_positive_tolerance_rejected() {
        let p = identity(2, vec![1.0, 1.0]);
        let out = run_threads(1, ReduceOrder::Tree, DEFAULT_TIMEOUT, |c| {
            solve_cgls(
                c,
                &p,
                CglsOptions {
                    tol: 0.0,
                    max_iter: None,
                },
            )
            .is_err()
        });
        assert!(out[0]);
    }
}
