//! Fidelity+ / Fidelity- scoring of edge explanations.
//!
//! Both metrics read the probability of the class predicted on the full
//! computational graph, even when a masked graph would flip the argmax.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::Predictor;
use crate::solver::rank_edges;

pub const DEFAULT_BASELINE_TRIALS: usize = 10;

/// Which edges a random baseline picks, mirroring the explainer's selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    /// Remove `k` edges (Fidelity+).
    Remove(usize),
    /// Keep the `ceil((1 - sparsity) n)` edges (Fidelity-).
    Sparsity(f64),
}

/// Number of edges kept at `sparsity`. A small guard keeps values such as
/// `(1 - 0.7) * 10` from rounding up past the exact product.
pub fn keep_count(n: usize, sparsity: f64) -> usize {
    let raw = (1.0 - sparsity) * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

#[derive(Debug)]
pub struct FidelityScorer<'a> {
    predictor: &'a Predictor<'a>,
    class: usize,
    full_value: f64,
}

impl<'a> FidelityScorer<'a> {
    pub fn new(predictor: &'a Predictor<'a>, class: usize) -> Result<Self> {
        let full = vec![1u8; predictor.num_players()];
        let full_value = predictor.predict(&full, class)? as f64;
        Ok(FidelityScorer {
            predictor,
            class,
            full_value,
        })
    }

    pub fn full_value(&self) -> f64 {
        self.full_value
    }

    fn value_of(&self, mask: &[u8]) -> Result<f64> {
        Ok(self.predictor.predict(mask, self.class)? as f64)
    }

    fn check_players(&self, players: &[usize]) -> Result<()> {
        let n = self.predictor.num_players();
        if let Some(&bad) = players.iter().find(|&&p| p >= n) {
            return Err(Error::IndexOutOfRange {
                index: bad as u64,
                bound: n as u64,
                context: "selected player",
            });
        }
        Ok(())
    }

    /// `|f(G_c) - f(G_c \ selected)|`.
    pub fn fidelity_plus(&self, selected: &[usize]) -> Result<f64> {
        self.check_players(selected)?;
        if selected.is_empty() {
            return Ok(0.0);
        }
        let mut mask = vec![1u8; self.predictor.num_players()];
        for &p in selected {
            mask[p] = 0;
        }
        Ok((self.full_value - self.value_of(&mask)?).abs())
    }

    /// `|f(G_c) - f(kept)|` for an explicit kept edge set.
    pub fn fidelity_of_kept(&self, kept: &[usize]) -> Result<f64> {
        self.check_players(kept)?;
        let n = self.predictor.num_players();
        if kept.len() == n {
            return Ok(0.0);
        }
        let mut mask = vec![0u8; n];
        for &p in kept {
            mask[p] = 1;
        }
        Ok((self.full_value - self.value_of(&mask)?).abs())
    }

    /// Keeps the highest-valued players at the given sparsity.
    pub fn fidelity_minus(&self, phi: &[f64], sparsity: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&sparsity) {
            return Err(Error::Domain(format!("sparsity {sparsity} outside [0, 1]")));
        }
        let n = self.predictor.num_players();
        if phi.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} Shapley values for {n} players",
                phi.len()
            )));
        }
        let kept = rank_edges(phi, keep_count(n, sparsity))?;
        self.fidelity_of_kept(&kept)
    }

    /// Mean fidelity over `trials` uniformly random selections of the same
    /// cardinality as `selection`.
    pub fn random_baseline(&self, selection: Selection, seed: u64, trials: usize) -> Result<f64> {
        if trials == 0 {
            return Err(Error::Domain(
                "random baseline needs at least one trial".into(),
            ));
        }
        let n = self.predictor.num_players();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..trials {
            total += match selection {
                Selection::Remove(k) => {
                    let k = k.min(n);
                    self.fidelity_plus(&sample(&mut rng, n, k).into_vec())?
                }
                Selection::Sparsity(s) => {
                    if !(0.0..=1.0).contains(&s) {
                        return Err(Error::Domain(format!("sparsity {s} outside [0, 1]")));
                    }
                    self.fidelity_of_kept(&sample(&mut rng, n, keep_count(n, s)).into_vec())?
                }
            };
        }
        Ok(total / trials as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKScore {
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityScore {
    pub sparsity: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub node: usize,
    pub predicted_class: usize,
    pub full_score: f64,
    pub fidelity_plus: Vec<TopKScore>,
    pub fidelity_minus: Vec<SparsityScore>,
    pub baseline_plus: Vec<TopKScore>,
    pub baseline_minus: Vec<SparsityScore>,
    pub baseline_seed: u64,
    pub baseline_trials: usize,
}

/// Scores an explanation at every requested `k` and sparsity, alongside the
/// random baseline. `k` larger than the player count is clamped.
pub fn evaluate(
    predictor: &Predictor<'_>,
    class: usize,
    node: usize,
    phi: &[f64],
    top_ks: &[usize],
    sparsities: &[f64],
    baseline_seed: u64,
    baseline_trials: usize,
) -> Result<FidelityReport> {
    let scorer = FidelityScorer::new(predictor, class)?;
    let n = predictor.num_players();
    let mut report = FidelityReport {
        node,
        predicted_class: class,
        full_score: scorer.full_value(),
        fidelity_plus: Vec::new(),
        fidelity_minus: Vec::new(),
        baseline_plus: Vec::new(),
        baseline_minus: Vec::new(),
        baseline_seed,
        baseline_trials,
    };
    for &k in top_ks {
        let top = rank_edges(phi, k.min(n))?;
        report.fidelity_plus.push(TopKScore {
            k,
            value: scorer.fidelity_plus(&top)?,
        });
        report.baseline_plus.push(TopKScore {
            k,
            value: scorer.random_baseline(Selection::Remove(k), baseline_seed, baseline_trials)?,
        });
    }
    for &s in sparsities {
        report.fidelity_minus.push(SparsityScore {
            sparsity: s,
            value: scorer.fidelity_minus(phi, s)?,
        });
        report.baseline_minus.push(SparsityScore {
            sparsity: s,
            value: scorer.random_baseline(
                Selection::Sparsity(s),
                baseline_seed,
                baseline_trials,
            )?,
        });
    }
    Ok(report)
}
