//! Exact Shapley values by full coalition enumeration.

use crate::error::{Error, Result};
use crate::gnn::{GcnModel, Predictor};
use crate::graph::ComputationalGraph;

pub const MAX_EXACT_PLAYERS: usize = 22;
const CHUNK_ROWS: usize = 4096;

/// `|S|! (n-|S|-1)! / n!` for `|S|` in `0..n`, as `1 / (n C(n-1, s))`.
fn marginal_weights(n: usize) -> Vec<f64> {
    let mut binom: u64 = 1;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        if s > 0 {
            binom = binom * (n - s) as u64 / s as u64;
        }
        out.push(1.0 / (n as f64 * binom as f64));
    }
    out
}

/// Evaluates `value_fn` on every subset in Gray-code order, storing results
/// by bitmask. The mask slice passed to `value_fn` holds 0/1 per player.
fn tabulate(n: usize, mut value_fn: impl FnMut(&[u8]) -> f64) -> Vec<f64> {
    let total = 1usize << n;
    let mut table = vec![0.0; total];
    let mut mask = vec![0u8; n];
    let mut bits = 0usize;
    table[0] = value_fn(&mask);
    for step in 1..total {
        let flip = step.trailing_zeros() as usize;
        mask[flip] ^= 1;
        bits ^= 1 << flip;
        table[bits] = value_fn(&mask);
    }
    table
}

/// Shapley values from a table of coalition values indexed by bitmask.
fn shapley_from_table(n: usize, table: &[f64]) -> Vec<f64> {
    let weights = marginal_weights(n);
    (0..n)
        .map(|i| {
            let bit = 1usize << i;
            // Neumaier-compensated accumulation
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for s in 0..table.len() {
                if s & bit != 0 {
                    continue;
                }
                let term = weights[s.count_ones() as usize] * (table[s | bit] - table[s]);
                let t = sum + term;
                if sum.abs() >= term.abs() {
                    comp += (sum - t) + term;
                } else {
                    comp += (term - t) + sum;
                }
                sum = t;
            }
            sum + comp
        })
        .collect()
}

fn check_size(n: usize) -> Result<()> {
    if n > MAX_EXACT_PLAYERS {
        return Err(Error::TooLarge(format!(
            "exact Shapley enumeration limited to {MAX_EXACT_PLAYERS} players, got {n}"
        )));
    }
    Ok(())
}

/// Exact Shapley values of an arbitrary deterministic game on `n` players.
pub fn exact_shapley(n: usize, value_fn: impl FnMut(&[u8]) -> f64) -> Result<Vec<f64>> {
    check_size(n)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    Ok(shapley_from_table(n, &tabulate(n, value_fn)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactExplanation {
    pub phi: Vec<f64>,
    /// `f(empty)`.
    pub phi0: f64,
    /// `f(N)`.
    pub full_value: f64,
    pub class: usize,
}

/// Exact edge Shapley values for the model's predicted class.
pub fn exact_shapley_gnn(model: &GcnModel, cg: &ComputationalGraph) -> Result<ExactExplanation> {
    let n = cg.num_players();
    check_size(n)?;
    let predictor = Predictor::new(model, cg)?;
    let class = predictor.predicted_class();

    // Masks in Gray-code order, evaluated in batches, then scattered back.
    let total = 1usize << n;
    let mut table = vec![0.0; total];
    let mut mask = vec![0u8; n];
    let mut bits = 0usize;
    let mut chunk = Vec::with_capacity(CHUNK_ROWS * n.max(1));
    let mut chunk_bits = Vec::with_capacity(CHUNK_ROWS);
    for step in 0..total {
        if step > 0 {
            let flip = step.trailing_zeros() as usize;
            mask[flip] ^= 1;
            bits ^= 1 << flip;
        }
        chunk.extend_from_slice(&mask);
        chunk_bits.push(bits);
        if chunk_bits.len() == CHUNK_ROWS || step + 1 == total {
            let values = if n == 0 {
                vec![predictor.predict(&[], class)?]
            } else {
                predictor.predict_batched(&chunk, class, crate::gnn::DEFAULT_BATCH_SIZE)?
            };
            for (&b, v) in chunk_bits.iter().zip(values) {
                table[b] = v as f64;
            }
            chunk.clear();
            chunk_bits.clear();
        }
    }

    let phi = if n == 0 {
        Vec::new()
    } else {
        shapley_from_table(n, &table)
    };
    Ok(ExactExplanation {
        phi,
        phi0: table[0],
        full_value: table[total - 1],
        class,
    })
}
