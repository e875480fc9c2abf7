//! Stochastic-process property checks.
//!
//! A model over function sets must be exchangeable (predictions follow any
//! reordering of context or target points) and consistent (the prediction
//! at a point does not depend on which other points are queried alongside
//! it). Both hold architecturally here: context sets enter through
//! order-invariant attention and pooling, and targets decode per query.
//! The checks verify this numerically on arbitrary predictors, so
//! deliberately broken mocks can serve as negative controls.
//!
//! Checks compare posterior-mean (sampling-free) predictive parameters, so
//! deviations measure architecture, not noise alignment.

use crate::autodiff::Real;
use crate::datasets::MultiTaskBatch;
use crate::models::{Model, ModelError, PredictMode, StackedBatch, TaskParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default tolerance for exchangeability deviations.
pub const EXCHANGEABILITY_TOL: f64 = 1e-5;
/// Default tolerance for consistency deviations.
pub const CONSISTENCY_TOL: f64 = 1e-6;

/// Per-family predictor under test: maps one family to per-task predictive
/// parameters over its target rows.
pub type PredictorFn<'a> =
    dyn Fn(&MultiTaskBatch<f64>) -> Result<Vec<TaskParams>, ModelError> + 'a;

/// Outcome of a property check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessReport {
    pub trials: usize,
    pub max_deviation: f64,
    pub tol: f64,
}

impl ProcessReport {
    pub fn pass(&self) -> bool {
        self.max_deviation < self.tol
    }
}

/// Posterior-mean predictor backed by a model.
pub fn model_predictor<F: Real>(
    model: &Model<F>,
) -> impl Fn(&MultiTaskBatch<f64>) -> Result<Vec<TaskParams>, ModelError> + '_ {
    move |batch| {
        let sb = StackedBatch::<F>::stack(std::slice::from_ref(batch))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut sets = model.predict_params(&sb, PredictMode::Map, &mut rng)?;
        Ok(sets.remove(0).per_family.remove(0))
    }
}

/// Runs random row permutations against the predictor: even trials permute
/// every target row (reordering the stored context along the way), odd
/// trials permute only non-context rows (pure target reordering). Reports
/// the largest absolute parameter difference between the permuted
/// prediction and the correspondingly permuted identity prediction.
pub fn check_exchangeability(
    predict: &PredictorFn,
    batch: &MultiTaskBatch<f64>,
    rng: &mut ChaCha8Rng,
    trials: usize,
    tol: f64,
) -> Result<ProcessReport, ModelError> {
    let base = predict(batch)?;
    let n = batch.n_target();
    let mut max_deviation = 0.0f64;
    for trial in 0..trials {
        let mut perm: Vec<usize> = (0..n).collect();
        if trial % 2 == 0 {
            perm.shuffle(rng);
        } else {
            let free: Vec<usize> = (0..n)
                .filter(|i| !batch.context_idx.contains(i))
                .collect();
            let mut shuffled = free.clone();
            shuffled.shuffle(rng);
            for (&slot, &value) in free.iter().zip(&shuffled) {
                perm[slot] = value;
            }
        }
        let permuted = permute_rows(batch, &perm);
        let pred = predict(&permuted)?;
        max_deviation = max_deviation.max(mapped_deviation(&base, &pred, &perm));
    }
    Ok(ProcessReport {
        trials,
        max_deviation,
        tol,
    })
}

/// Runs random target subsets (always containing the context rows) against
/// the predictor: per-point parameters computed on the subset must equal
/// those computed on the full target set. Reports the largest absolute
/// difference.
pub fn check_consistency(
    predict: &PredictorFn,
    batch: &MultiTaskBatch<f64>,
    rng: &mut ChaCha8Rng,
    trials: usize,
    tol: f64,
) -> Result<ProcessReport, ModelError> {
    let base = predict(batch)?;
    let n = batch.n_target();
    let free: Vec<usize> = (0..n)
        .filter(|i| !batch.context_idx.contains(i))
        .collect();
    let mut max_deviation = 0.0f64;
    for _ in 0..trials {
        let extra = rng.gen_range(0..=free.len());
        let mut rows: Vec<usize> = batch.context_idx.clone();
        let mut picked = free.clone();
        picked.shuffle(rng);
        rows.extend(picked.into_iter().take(extra));
        rows.sort_unstable();
        let subset = gather_rows(batch, &rows);
        let pred = predict(&subset)?;
        max_deviation = max_deviation.max(mapped_deviation(&base, &pred, &rows));
    }
    Ok(ProcessReport {
        trials,
        max_deviation,
        tol,
    })
}

/// Largest |param difference| between `base` at row `map[j]` and `other`
/// at row `j`, across tasks and parameter kinds.
fn mapped_deviation(base: &[TaskParams], other: &[TaskParams], map: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for (b, o) in base.iter().zip(other) {
        match (b, o) {
            (
                TaskParams::Gaussian { mean: bm, var: bv },
                TaskParams::Gaussian { mean: om, var: ov },
            ) => {
                for (j, &i) in map.iter().enumerate() {
                    worst = worst.max((bm[i] - om[j]).abs());
                    worst = worst.max((bv[i] - ov[j]).abs());
                }
            }
            (
                TaskParams::Categorical {
                    probs: bp,
                    classes: bc,
                },
                TaskParams::Categorical {
                    probs: op,
                    classes: oc,
                },
            ) if bc == oc => {
                for (j, &i) in map.iter().enumerate() {
                    for c in 0..*bc {
                        worst = worst.max((bp[i * bc + c] - op[j * oc + c]).abs());
                    }
                }
            }
            _ => return f64::INFINITY,
        }
    }
    worst
}

/// Reorders target rows so that new row `j` is old row `perm[j]`,
/// remapping the context selection (indices re-sorted ascending, masks
/// carried along).
fn permute_rows(batch: &MultiTaskBatch<f64>, perm: &[usize]) -> MultiTaskBatch<f64> {
    let n = batch.n_target();
    assert_eq!(perm.len(), n);
    let mut inv = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let d = batch.x_dim;
    let mut x = Vec::with_capacity(n * d);
    for &old in perm {
        x.extend_from_slice(&batch.x_target[old * d..(old + 1) * d]);
    }
    let y: Vec<Vec<f64>> = batch
        .y_target
        .iter()
        .map(|col| perm.iter().map(|&old| col[old]).collect())
        .collect();
    let mask: Vec<Vec<bool>> = batch
        .target_mask
        .iter()
        .map(|col| perm.iter().map(|&old| col[old]).collect())
        .collect();
    let mut out = MultiTaskBatch::from_complete_target(x, y, d);
    out.target_mask = mask;
    let mut order: Vec<(usize, usize)> = batch
        .context_idx
        .iter()
        .enumerate()
        .map(|(pos, &old)| (inv[old], pos))
        .collect();
    order.sort_unstable();
    let idx: Vec<usize> = order.iter().map(|&(new, _)| new).collect();
    let masks: Vec<Vec<bool>> = (0..batch.n_tasks)
        .map(|t| {
            order
                .iter()
                .map(|&(_, pos)| batch.context_mask[t][pos])
                .collect()
        })
        .collect();
    out.with_context(idx, masks)
}

/// Restricts the batch to the given ascending target rows, which must
/// include every context row.
fn gather_rows(batch: &MultiTaskBatch<f64>, rows: &[usize]) -> MultiTaskBatch<f64> {
    let d = batch.x_dim;
    let mut x = Vec::with_capacity(rows.len() * d);
    for &i in rows {
        x.extend_from_slice(&batch.x_target[i * d..(i + 1) * d]);
    }
    let y: Vec<Vec<f64>> = batch
        .y_target
        .iter()
        .map(|col| rows.iter().map(|&i| col[i]).collect())
        .collect();
    let mask: Vec<Vec<bool>> = batch
        .target_mask
        .iter()
        .map(|col| rows.iter().map(|&i| col[i]).collect())
        .collect();
    let mut out = MultiTaskBatch::from_complete_target(x, y, d);
    out.target_mask = mask;
    let idx: Vec<usize> = batch
        .context_idx
        .iter()
        .map(|&old| {
            rows.binary_search(&old)
                .expect("subset must contain every context row")
        })
        .collect();
    out.with_context(idx, batch.context_mask.clone())
}
