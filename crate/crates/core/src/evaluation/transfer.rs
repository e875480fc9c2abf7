//! Transfer-gain analysis: how much does observing source tasks improve
//! target-task predictions?
//!
//! The probe starts every family from a minimal context, one randomly
//! chosen completely labeled example, then adds all of the family's labels
//! for a subset of source tasks and measures the relative error change on
//! each remaining task. Gains are averaged over seeds (which move the base
//! example) and, for per-pair summaries, over every source set containing
//! the pair's source task.

use super::metrics::{masked_mse, mc_predictive, stride_targets, EvalMode, McOptions,
    McPrediction};
use super::EvalError;
use crate::autodiff::Real;
use crate::datasets::{derive_seed, MultiTaskBatch};
use crate::models::Model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Knobs of a transfer probe.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferProtocol {
    /// One probe per seed; each seed re-draws the base examples.
    pub seeds: Vec<u64>,
    pub n_z: usize,
    pub n_v: usize,
    /// Families stacked per prediction graph.
    pub chunk: usize,
    /// Score every `target_stride`-th target row.
    pub target_stride: usize,
}

impl Default for TransferProtocol {
    fn default() -> Self {
        TransferProtocol {
            seeds: vec![1, 2, 3, 4, 5],
            n_z: 5,
            n_v: 5,
            chunk: 5,
            target_stride: 1,
        }
    }
}

/// One (target, source set) measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferCell {
    pub err_before: f64,
    pub err_after: f64,
    /// Relative error reduction, `(before - after) / before`.
    pub gain: f64,
}

/// One transfer CSV row, seed-averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub target: String,
    /// Source task names joined with `+`.
    pub source_set: String,
    pub gain_pct: f64,
}

/// Per-(source, target) gain, averaged over every source set containing
/// the source.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGain {
    pub source: String,
    pub target: String,
    pub gain_pct: f64,
}

/// Full probe output.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub rows: Vec<TransferRow>,
    pub pairs: Vec<PairGain>,
}

/// Every nonempty proper subset of the task set, ordered by size then
/// lexicographically. The position in this list fixes each subset's noise
/// stream, so single-cell probes and the full matrix agree exactly.
fn all_proper_subsets(n_tasks: usize) -> Vec<Vec<usize>> {
    let mut subsets = Vec::new();
    for mask in 1u32..(1 << n_tasks) {
        let subset: Vec<usize> = (0..n_tasks).filter(|&t| mask >> t & 1 == 1).collect();
        if subset.len() < n_tasks {
            subsets.push(subset);
        }
    }
    subsets.sort_by_key(|s| (s.len(), s.clone()));
    subsets
}

/// Nonempty source subsets available for a target: every nonempty subset
/// of the remaining tasks, ordered by size then lexicographically.
pub fn source_subsets(n_tasks: usize, target: usize) -> Vec<Vec<usize>> {
    assert!(target < n_tasks);
    all_proper_subsets(n_tasks)
        .into_iter()
        .filter(|s| !s.contains(&target))
        .collect()
}

fn relative_gain(before: f64, after: f64) -> f64 {
    (before - after) / before
}

fn validate_common<F: Real>(
    model: &Model<F>,
    families: &[MultiTaskBatch<f64>],
    scales: Option<&[f64]>,
) -> Result<usize, EvalError> {
    if families.is_empty() {
        return Err(EvalError::Domain {
            message: "no families to probe".into(),
        });
    }
    let n_tasks = model.dims.n_tasks;
    if families.iter().any(|f| f.n_tasks != n_tasks) {
        return Err(EvalError::Domain {
            message: "family task count does not match the model".into(),
        });
    }
    if let Some(s) = scales {
        if s.len() != families.len() {
            return Err(EvalError::Domain {
                message: format!("{} scales for {} families", s.len(), families.len()),
            });
        }
    }
    Ok(n_tasks)
}

fn base_context(batch: &MultiTaskBatch<f64>, row: usize) -> MultiTaskBatch<f64> {
    batch
        .clone()
        .with_context(vec![row], vec![vec![true]; batch.n_tasks])
}

/// Context holding the base row for every task plus all rows for the
/// source tasks.
fn source_context(
    batch: &MultiTaskBatch<f64>,
    row: usize,
    sources: &[usize],
) -> MultiTaskBatch<f64> {
    let n = batch.n_target();
    let masks: Vec<Vec<bool>> = (0..batch.n_tasks)
        .map(|t| {
            let observed = sources.contains(&t);
            (0..n).map(|i| observed || i == row).collect()
        })
        .collect();
    batch.clone().with_context((0..n).collect(), masks)
}

fn task_error(
    pred: &McPrediction,
    batches: &[MultiTaskBatch<f64>],
    scales: Option<&[f64]>,
    t: usize,
) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    for (fam, batch) in batches.iter().enumerate() {
        let err = masked_mse(&pred.point[fam][t], &batch.y_target[t], &batch.target_mask[t]);
        let scale = scales.map_or(1.0, |s| s[fam]);
        if scale.abs() < 1e-12 {
            return Err(EvalError::Domain {
                message: "normalization scale is zero".into(),
            });
        }
        sum += err / (scale * scale);
    }
    Ok(sum / batches.len() as f64)
}

fn probe_errors<F: Real>(
    model: &Model<F>,
    strided: &[MultiTaskBatch<f64>],
    scales: Option<&[f64]>,
    seed: u64,
    pass: u64,
    contexts: &[MultiTaskBatch<f64>],
    opts: &McOptions,
) -> Result<Vec<f64>, EvalError> {
    let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(seed, "transfer_mc", pass));
    let pred = mc_predictive(model, contexts, &mut noise, opts)?;
    (0..strided[0].n_tasks)
        .map(|t| task_error(&pred, strided, scales, t))
        .collect()
}

/// Measures one (target, sources) cell: error with the base context alone
/// versus error after adding every label of the source tasks, averaged
/// over the protocol seeds.
pub fn transfer_gain<F: Real>(
    model: &Model<F>,
    families: &[MultiTaskBatch<f64>],
    scales: Option<&[f64]>,
    target: usize,
    sources: &[usize],
    protocol: &TransferProtocol,
) -> Result<TransferCell, EvalError> {
    let n_tasks = validate_common(model, families, scales)?;
    if target >= n_tasks {
        return Err(EvalError::Protocol {
            message: format!("target task {target} out of range"),
        });
    }
    if sources.is_empty() || sources.iter().any(|&s| s >= n_tasks) {
        return Err(EvalError::Protocol {
            message: "sources must be a nonempty set of valid tasks".into(),
        });
    }
    if sources.contains(&target) {
        return Err(EvalError::Protocol {
            message: format!("target task {target} listed among sources"),
        });
    }
    let mut subset: Vec<usize> = sources.to_vec();
    subset.sort_unstable();
    subset.dedup();
    if subset.len() != sources.len() {
        return Err(EvalError::Protocol {
            message: "duplicate source task".into(),
        });
    }
    let pass = 1 + all_proper_subsets(n_tasks)
        .iter()
        .position(|s| *s == subset)
        .expect("validated subset appears in the enumeration") as u64;
    let strided: Vec<MultiTaskBatch<f64>> = families
        .iter()
        .map(|f| stride_targets(f, protocol.target_stride))
        .collect();
    let opts = McOptions {
        n_z: protocol.n_z,
        n_v: protocol.n_v,
        mode: EvalMode::Mean,
        chunk: protocol.chunk,
    };
    let mut before_sum = 0.0;
    let mut after_sum = 0.0;
    let mut gain_sum = 0.0;
    for &seed in &protocol.seeds {
        let rows = base_rows(&strided, seed);
        let base_ctx: Vec<MultiTaskBatch<f64>> = strided
            .iter()
            .zip(&rows)
            .map(|(f, &r)| base_context(f, r))
            .collect();
        let before = probe_errors(model, &strided, scales, seed, 0, &base_ctx, &opts)?[target];
        let src_ctx: Vec<MultiTaskBatch<f64>> = strided
            .iter()
            .zip(&rows)
            .map(|(f, &r)| source_context(f, r, &subset))
            .collect();
        let after = probe_errors(model, &strided, scales, seed, pass, &src_ctx, &opts)?[target];
        if before <= 0.0 {
            return Err(EvalError::Domain {
                message: "baseline error vanished; gain undefined".into(),
            });
        }
        before_sum += before;
        after_sum += after;
        gain_sum += relative_gain(before, after);
    }
    let k = protocol.seeds.len() as f64;
    Ok(TransferCell {
        err_before: before_sum / k,
        err_after: after_sum / k,
        gain: gain_sum / k,
    })
}

fn base_rows(strided: &[MultiTaskBatch<f64>], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "transfer_base", 0));
    strided
        .iter()
        .map(|f| rng.gen_range(0..f.n_target()))
        .collect()
}

/// Runs the full probe: every source subset against every target outside
/// it, sharing prediction passes across targets. Returns seed-averaged
/// rows plus per-pair aggregates.
pub fn transfer_matrix<F: Real>(
    model: &Model<F>,
    families: &[MultiTaskBatch<f64>],
    scales: Option<&[f64]>,
    task_names: &[String],
    protocol: &TransferProtocol,
) -> Result<TransferReport, EvalError> {
    let n_tasks = validate_common(model, families, scales)?;
    if task_names.len() != n_tasks {
        return Err(EvalError::Domain {
            message: format!("{} task names for {} tasks", task_names.len(), n_tasks),
        });
    }
    let strided: Vec<MultiTaskBatch<f64>> = families
        .iter()
        .map(|f| stride_targets(f, protocol.target_stride))
        .collect();
    let opts = McOptions {
        n_z: protocol.n_z,
        n_v: protocol.n_v,
        mode: EvalMode::Mean,
        chunk: protocol.chunk,
    };
    let subsets = all_proper_subsets(n_tasks);

    // gains[subset index][target] accumulated over seeds
    let mut gains: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); n_tasks]; subsets.len()];
    for &seed in &protocol.seeds {
        let rows = base_rows(&strided, seed);
        let base_ctx: Vec<MultiTaskBatch<f64>> = strided
            .iter()
            .zip(&rows)
            .map(|(f, &r)| base_context(f, r))
            .collect();
        let before = probe_errors(model, &strided, scales, seed, 0, &base_ctx, &opts)?;
        if before.iter().any(|&e| e <= 0.0) {
            return Err(EvalError::Domain {
                message: "baseline error vanished; gain undefined".into(),
            });
        }
        for (p, subset) in subsets.iter().enumerate() {
            let ctx: Vec<MultiTaskBatch<f64>> = strided
                .iter()
                .zip(&rows)
                .map(|(f, &r)| source_context(f, r, subset))
                .collect();
            let after =
                probe_errors(model, &strided, scales, seed, 1 + p as u64, &ctx, &opts)?;
            for target in 0..n_tasks {
                if !subset.contains(&target) {
                    gains[p][target].push(relative_gain(before[target], after[target]));
                }
            }
        }
    }

    let mut rows = Vec::new();
    for target in 0..n_tasks {
        for (p, subset) in subsets.iter().enumerate() {
            if subset.contains(&target) {
                continue;
            }
            let seed_gains = &gains[p][target];
            let mean = seed_gains.iter().sum::<f64>() / seed_gains.len() as f64;
            rows.push(TransferRow {
                target: task_names[target].clone(),
                source_set: subset
                    .iter()
                    .map(|&t| task_names[t].as_str())
                    .collect::<Vec<_>>()
                    .join("+"),
                gain_pct: 100.0 * mean,
            });
        }
    }

    let mut pairs = Vec::new();
    for source in 0..n_tasks {
        for target in 0..n_tasks {
            if source == target {
                continue;
            }
            let mut acc = Vec::new();
            for (p, subset) in subsets.iter().enumerate() {
                if subset.contains(&source) && !subset.contains(&target) {
                    let seed_gains = &gains[p][target];
                    acc.push(seed_gains.iter().sum::<f64>() / seed_gains.len() as f64);
                }
            }
            pairs.push(PairGain {
                source: task_names[source].clone(),
                target: task_names[target].clone(),
                gain_pct: 100.0 * acc.iter().sum::<f64>() / acc.len() as f64,
            });
        }
    }
    Ok(TransferReport { rows, pairs })
}

/// Writes rows with the fixed column set `target,source_set,gain_pct`.
pub fn write_transfer_csv(path: &Path, rows: &[TransferRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
    for row in rows {
        w.serialize(row)
            .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}
