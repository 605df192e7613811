//! Coalition sampling with the Shapley-kernel size distribution.
//!
//! Samples are produced in complementary pairs: a coalition of size `s` is
//! always followed by its complement of size `n - s`, so every pair holds
//! exactly `n` active players. Pairs form one global sequence (size classes
//! outer, pairs inner) dealt round-robin to ranks; each pair draws from its
//! own counter-based stream keyed by `(seed, global pair index)`, which makes
//! the global mask matrix independent of the worker count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shapley kernel weight `(n-1) / (C(n,s) s (n-s))`.
pub fn kernel_weight(n: usize, s: usize) -> Result<f64> {
    if n < 2 || s == 0 || s >= n {
        return Err(Error::Domain(format!(
            "kernel weight undefined for n={n}, s={s} (requires 1 <= s <= n-1)"
        )));
    }
    let binom = binomial_f64(n, s);
    let denom_tail = (s * (n - s)) as f64;
    if binom.is_finite() {
        Ok((n - 1) as f64 / (binom * denom_tail))
    } else {
        Ok(f64::exp(
            ((n - 1) as f64).ln() - ln_binomial(n, s) - denom_tail.ln(),
        ))
    }
}

/// Total kernel mass of all coalitions of size `s`: `(n-1) / (s (n-s))`.
pub fn size_mass(n: usize, s: usize) -> f64 {
    (n - 1) as f64 / (s * (n - s)) as f64
}

fn binomial_f64(n: usize, s: usize) -> f64 {
    let s = s.min(n - s);
    let mut acc = 1.0f64;
    for i in 1..=s {
        acc = acc * (n - s + i) as f64 / i as f64;
        if !acc.is_finite() {
            return f64::INFINITY;
        }
    }
    acc.round()
}

fn ln_binomial(n: usize, s: usize) -> f64 {
    let s = s.min(n - s);
    (1..=s)
        .map(|i| ((n - s + i) as f64).ln() - (i as f64).ln())
        .sum()
}

fn binomial_u64(n: usize, s: usize) -> u64 {
    if s > n {
        return 0;
    }
    let s = s.min(n - s);
    let mut acc: u128 = 1;
    for i in 1..=s as u128 {
        acc = acc * (n as u128 - s as u128 + i) / i;
    }
    acc as u64
}

/// Planned number of samples per coalition size.
#[derive(Debug, Clone, PartialEq)]
pub struct SizePlan {
    pub n: usize,
    /// Requested sample budget.
    pub k: usize,
    /// Every proper non-empty coalition is enumerated exactly once.
    pub exhaustive: bool,
    /// Proportional allocation: `per_size[s]` samples of size `s`, for `s`
    /// in `0..=n` (ends are zero).
    pub per_size: Vec<usize>,
    /// `pairs[c]` complementary pairs `(c, n-c)` for `c` in `1..=n/2`.
    pub pairs: Vec<usize>,
    /// Rows actually generated per size: `per_size`, or the binomial
    /// coefficients in exhaustive mode.
    pub row_counts: Vec<usize>,
    /// Pairs actually generated per class.
    pub pair_counts: Vec<usize>,
}

impl SizePlan {
    pub fn total_rows(&self) -> usize {
        self.row_counts.iter().sum()
    }

    pub fn total_pairs(&self) -> usize {
        self.pair_counts.iter().sum()
    }

    /// The same allocation with exhaustive enumeration switched off.
    pub fn into_sampled(mut self) -> SizePlan {
        self.exhaustive = false;
        self.row_counts = self.per_size.clone();
        self.pair_counts = self.pairs.clone();
        self
    }

    /// Size-class pairing `(s, n-s)` for every class with planned pairs.
    pub fn pairing(&self) -> Vec<(usize, usize)> {
        (1..self.pairs.len())
            .filter(|&c| self.pairs[c] > 0)
            .map(|c| (c, self.n - c))
            .collect()
    }

    /// Regression weight of one row of size `s`: the kernel mass of the size
    /// class spread evenly over its planned rows. In exhaustive mode this is
    /// exactly the kernel weight.
    pub fn row_weight(&self, s: usize) -> f64 {
        if self.exhaustive {
            kernel_weight(self.n, s).expect("proper coalition size")
        } else {
            size_mass(self.n, s) / self.row_counts[s] as f64
        }
    }

    fn class_of_pair(&self, global_pair: u64) -> (usize, u64) {
        let mut g = global_pair;
        for c in 1..self.pair_counts.len() {
            let cnt = self.pair_counts[c] as u64;
            if g < cnt {
                return (c, g);
            }
            g -= cnt;
        }
        panic!("pair index {global_pair} beyond plan");
    }
}

/// Whether `2^n - 2 <= k`.
fn fits_exhaustively(n: usize, k: usize) -> bool {
    n < 63 && (1u64 << n) - 2 <= k as u64
}

pub fn plan_sizes(n: usize, k: usize) -> Result<SizePlan> {
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 players, got {n}")));
    }
    if k < 2 || !k.is_multiple_of(2) {
        return Err(Error::Domain(format!(
            "sample count must be even and >= 2, got {k}"
        )));
    }
    let half = n / 2;
    let mut pairs = vec![0usize; half + 1];
    let mut per_size = vec![0usize; n + 1];

    // Pair quotas: a class (c, n-c) receives k_c pairs; the middle class of
    // an even n contributes two rows of the same size per pair.
    let class_mass = |c: usize| {
        let m = size_mass(n, c);
        if 2 * c == n {
            m / 2.0
        } else {
            m
        }
    };
    let total_mass: f64 = (1..=half).map(class_mass).sum();
    let budget = k / 2;
    let quotas: Vec<f64> = (0..=half)
        .map(|c| {
            if c == 0 {
                0.0
            } else {
                budget as f64 * class_mass(c) / total_mass
            }
        })
        .collect();
    for c in 1..=half {
        pairs[c] = quotas[c].floor() as usize;
    }
    let assigned: usize = pairs.iter().sum();
    let mut order: Vec<usize> = (1..=half).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(budget.saturating_sub(assigned)) {
        pairs[c] += 1;
    }
    for c in 1..=half {
        per_size[c] += pairs[c];
        per_size[n - c] += pairs[c];
    }

    let plan = SizePlan {
        n,
        k,
        exhaustive: false,
        row_counts: per_size.clone(),
        pair_counts: pairs.clone(),
        per_size,
        pairs,
    };
    if !fits_exhaustively(n, k) {
        return Ok(plan);
    }
    let mut pair_counts = vec![0usize; half + 1];
    for (c, slot) in pair_counts.iter_mut().enumerate().skip(1) {
        let count = binomial_u64(n, c) as usize;
        *slot = if 2 * c == n { count / 2 } else { count };
    }
    let row_counts = (0..=n)
        .map(|s| {
            if s == 0 || s == n {
                0
            } else {
                binomial_u64(n, s) as usize
            }
        })
        .collect();
    Ok(SizePlan {
        exhaustive: true,
        row_counts,
        pair_counts,
        ..plan
    })
}

/// Worker-local slab of the mask matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBlock {
    pub n: usize,
    /// Flat row-major `k_local x n`, entries 0/1.
    pub rows: Vec<u8>,
    pub weights: Vec<f64>,
    /// Global pair index of each pair (rows `2j`, `2j+1`).
    pub pair_ids: Vec<u64>,
    pub rank: usize,
    pub rng_seed: u64,
}

impl MaskBlock {
    pub fn num_rows(&self) -> usize {
        self.rows.len().checked_div(self.n).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }

    pub fn popcount(&self) -> usize {
        self.rows.iter().map(|&b| b as usize).sum()
    }
}

/// Rank that owns global pair `g` under round-robin dealing.
pub fn owner_of_pair(g: u64, workers: usize) -> usize {
    (g % workers as u64) as usize
}

/// Counter-based stream for one pair.
fn pair_rng(seed: u64, global_pair: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(global_pair);
    rng
}

/// Lexicographic unranking of the `index`-th `size`-subset of `0..universe`.
fn unrank_combination(universe: usize, size: usize, mut index: u64, out: &mut [u8]) {
    let mut next = 0;
    for remaining in (1..=size).rev() {
        loop {
            let with_next = binomial_u64(universe - next - 1, remaining - 1);
            if index < with_next {
                out[next] = 1;
                next += 1;
                break;
            }
            index -= with_next;
            next += 1;
        }
    }
}

pub fn generate_masks(
    plan: &SizePlan,
    rank: usize,
    workers: usize,
    seed: u64,
) -> Result<MaskBlock> {
    if workers == 0 || rank >= workers {
        return Err(Error::Domain(format!(
            "rank {rank} invalid for {workers} workers"
        )));
    }
    let n = plan.n;
    let total = plan.total_pairs() as u64;
    let local_pairs = if total > rank as u64 {
        ((total - rank as u64 - 1) / workers as u64 + 1) as usize
    } else {
        0
    };
    let mut rows = vec![0u8; local_pairs * 2 * n];
    let mut weights = Vec::with_capacity(local_pairs * 2);
    let mut pair_ids = Vec::with_capacity(local_pairs);

    let mut g = rank as u64;
    for (j, pair) in rows.chunks_exact_mut(2 * n).enumerate() {
        debug_assert_eq!(g, rank as u64 + (j * workers) as u64);
        let (class, within) = plan.class_of_pair(g);
        let (first, second) = pair.split_at_mut(n);
        if plan.exhaustive {
            // The middle class only enumerates subsets without the last
            // player so each complementary pair appears once.
            let universe = if 2 * class == n { n - 1 } else { n };
            unrank_combination(universe, class, within, first);
        } else {
            let mut rng = pair_rng(seed, g);
            for idx in rand::seq::index::sample(&mut rng, n, class) {
                first[idx] = 1;
            }
        }
        for (c, &f) in second.iter_mut().zip(first.iter()) {
            *c = 1 - f;
        }
        weights.push(plan.row_weight(class));
        weights.push(plan.row_weight(n - class));
        pair_ids.push(g);
        g += workers as u64;
    }

    Ok(MaskBlock {
        n,
        rows,
        weights,
        pair_ids,
        rank,
        rng_seed: seed,
    })
}

const MASK_MAGIC: &[u8; 4] = b"SFM1";

/// Bit-packed dump: `SFM1`, u64 rows, u64 n, then `ceil(n/8)` bytes per row
/// (player `j` at bit `j % 8` of byte `j / 8`).
pub fn write_masks(block: &MaskBlock, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MASK_MAGIC)?;
    w.write_all(&(block.num_rows() as u64).to_le_bytes())?;
    w.write_all(&(block.n as u64).to_le_bytes())?;
    let stride = block.n.div_ceil(8);
    let mut packed = vec![0u8; stride];
    for i in 0..block.num_rows() {
        packed.iter_mut().for_each(|b| *b = 0);
        for (j, &bit) in block.row(i).iter().enumerate() {
            packed[j / 8] |= bit << (j % 8);
        }
        w.write_all(&packed)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dump written by [`write_masks`] into a flat 0/1 row matrix.
pub fn read_masks(path: impl AsRef<Path>) -> Result<(usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 20];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("mask file shorter than header".into()))?;
    if &head[..4] != MASK_MAGIC {
        return Err(Error::Format("bad mask magic".into()));
    }
    let rows = u64::from_le_bytes(head[4..12].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    let stride = n.div_ceil(8);
    let mut packed = vec![0u8; rows * stride];
    r.read_exact(&mut packed)
        .map_err(|_| Error::Format("mask file truncated".into()))?;
    let mut out = Vec::with_capacity(rows * n);
    for row in packed.chunks_exact(stride.max(1)).take(rows) {
        out.extend((0..n).map(|j| (row[j / 8] >> (j % 8)) & 1));
    }
    Ok((n, out))
}
