//! Data generation and context sampling.
//!
//! A [`MultiTaskBatch`] holds one function family: shared target inputs, one
//! output channel per task, and a context subset of the target rows with
//! per-task observation masks. Context labels that the mask marks unobserved
//! are poisoned with NaN in debug builds so any consumer that forgets to
//! consult the mask propagates the poison into a finiteness check instead of
//! silently training on dropped values.

pub mod synthetic;
pub mod weather;

use crate::autodiff::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::fmt;

/// Errors from dataset construction and context sampling.
#[derive(Debug, Clone, PartialEq)]
pub enum DataError {
    /// Asked for more context rows than the target holds.
    Size { needed: usize, available: usize },
    /// A data file violated the expected schema.
    Format { row: usize, message: String },
    /// An attribute with zero variance cannot be standardized.
    Degenerate { attribute: String },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Size { needed, available } => {
                write!(f, "need {needed} rows but only {available} are available")
            }
            DataError::Format { row, message } => {
                write!(f, "bad data file at row {row}: {message}")
            }
            DataError::Degenerate { attribute } => {
                write!(f, "attribute {attribute} has zero variance")
            }
        }
    }
}

impl std::error::Error for DataError {}

/// Derives an independent stream seed from a root seed, a purpose tag, and an
/// index. Used so families, batches, and evaluation draws each get their own
/// deterministic stream regardless of iteration order.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    let mut h = root ^ 0x9e37_79b9_7f4a_7c15;
    for &b in tag.as_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
    }
    h ^= index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn poison<F: Real>() -> F {
    if cfg!(debug_assertions) {
        F::nan()
    } else {
        F::zero()
    }
}

/// One function family: target set, per-task labels, and a context subset
/// with per-task observation masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskBatch<F> {
    pub x_dim: usize,
    pub n_tasks: usize,
    /// Target inputs, row-major `[n_target, x_dim]`.
    pub x_target: Vec<F>,
    /// Per-task target labels, each `[n_target]`.
    pub y_target: Vec<Vec<F>>,
    /// Per-task target observation masks, each `[n_target]`.
    pub target_mask: Vec<Vec<bool>>,
    /// Target rows serving as context, ascending and unique.
    pub context_idx: Vec<usize>,
    /// Context inputs gathered from `x_target`, `[n_context, x_dim]`.
    pub x_context: Vec<F>,
    /// Per-task context labels, each `[n_context]`; unobserved entries are
    /// poisoned, read the mask first.
    pub y_context: Vec<Vec<F>>,
    /// Per-task context observation masks, each `[n_context]`.
    pub context_mask: Vec<Vec<bool>>,
}

impl<F: Real> MultiTaskBatch<F> {
    /// Builds a fully observed target set with an empty context.
    pub fn from_complete_target(x_target: Vec<F>, y_target: Vec<Vec<F>>, x_dim: usize) -> Self {
        assert!(x_dim > 0 && x_target.len().is_multiple_of(x_dim));
        let n = x_target.len() / x_dim;
        let n_tasks = y_target.len();
        assert!(n_tasks > 0);
        for y in &y_target {
            assert_eq!(y.len(), n, "every task needs one label per target row");
        }
        let target_mask = vec![vec![true; n]; n_tasks];
        MultiTaskBatch {
            x_dim,
            n_tasks,
            x_target,
            y_target,
            target_mask,
            context_idx: Vec::new(),
            x_context: Vec::new(),
            y_context: vec![Vec::new(); n_tasks],
            context_mask: vec![Vec::new(); n_tasks],
        }
    }

    pub fn n_target(&self) -> usize {
        self.x_target.len() / self.x_dim
    }

    pub fn n_context(&self) -> usize {
        self.context_idx.len()
    }

    /// True when every context row is observed for every task.
    pub fn is_complete(&self) -> bool {
        self.context_mask.iter().all(|m| m.iter().all(|&b| b))
    }

    pub fn observed_context_count(&self) -> usize {
        self.context_mask
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn observed_target_count(&self) -> usize {
        self.target_mask
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .sum()
    }

    /// Installs a context selection: gathers inputs, applies the per-task
    /// masks, and poisons dropped labels.
    pub fn with_context(mut self, indices: Vec<usize>, masks: Vec<Vec<bool>>) -> Self {
        let n = self.n_target();
        assert_eq!(masks.len(), self.n_tasks);
        let mut prev = None;
        for &i in &indices {
            assert!(i < n, "context row {i} out of range");
            assert!(prev.is_none_or(|p| p < i), "context rows must ascend");
            prev = Some(i);
        }
        let m = indices.len();
        let mut x_context = Vec::with_capacity(m * self.x_dim);
        for &i in &indices {
            x_context.extend_from_slice(&self.x_target[i * self.x_dim..(i + 1) * self.x_dim]);
        }
        let mut y_context = Vec::with_capacity(self.n_tasks);
        for (t, mask) in masks.iter().enumerate() {
            assert_eq!(mask.len(), m);
            assert!(
                m == 0 || mask.iter().any(|&b| b),
                "task {t} has no observed context point"
            );
            let mut col = Vec::with_capacity(m);
            for (j, &i) in indices.iter().enumerate() {
                col.push(if mask[j] { self.y_target[t][i] } else { poison() });
            }
            y_context.push(col);
        }
        self.context_idx = indices;
        self.x_context = x_context;
        self.y_context = y_context;
        self.context_mask = masks;
        self
    }

    /// Context label for task `t` at context row `j`, or a zero placeholder
    /// when the mask says the label was dropped.
    pub fn context_label_or_zero(&self, t: usize, j: usize) -> F {
        if self.context_mask[t][j] {
            self.y_context[t][j]
        } else {
            F::zero()
        }
    }
}

fn sample_rows(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    let mut rows = rand::seq::index::sample(rng, n, m).into_vec();
    rows.sort_unstable();
    rows
}

const MASK_RESAMPLE_LIMIT: usize = 100;

/// Selects `m` target rows as context, then drops each (row, task) label
/// independently with probability `gamma`. A drop pattern that leaves some
/// task with zero observations is resampled a bounded number of times, after
/// which one surviving label is forced for each starved task.
pub fn sample_context_mask<F: Real>(
    rng: &mut ChaCha8Rng,
    target: &MultiTaskBatch<F>,
    m: usize,
    gamma: f64,
) -> Result<MultiTaskBatch<F>, DataError> {
    assert!((0.0..=1.0).contains(&gamma), "gamma must lie in [0, 1]");
    let n = target.n_target();
    if m > n {
        return Err(DataError::Size {
            needed: m,
            available: n,
        });
    }
    let indices = sample_rows(rng, n, m);
    let mut masks = vec![vec![true; m]; target.n_tasks];
    for _ in 0..MASK_RESAMPLE_LIMIT {
        for mask in masks.iter_mut() {
            for slot in mask.iter_mut() {
                *slot = rng.gen::<f64>() >= gamma;
            }
        }
        if masks.iter().all(|mask| mask.iter().any(|&b| b)) {
            return Ok(target.clone().with_context(indices, masks));
        }
    }
    for mask in masks.iter_mut() {
        if !mask.iter().any(|&b| b) {
            mask[rng.gen_range(0..m)] = true;
        }
    }
    Ok(target.clone().with_context(indices, masks))
}

/// Samples a context whose per-task input sets are pairwise disjoint: each
/// context row carries exactly one task label.
pub fn sample_totally_incomplete<F: Real>(
    rng: &mut ChaCha8Rng,
    target: &MultiTaskBatch<F>,
    per_task_counts: &[usize],
) -> Result<MultiTaskBatch<F>, DataError> {
    assert_eq!(per_task_counts.len(), target.n_tasks);
    assert!(per_task_counts.iter().all(|&k| k >= 1));
    let total: usize = per_task_counts.iter().sum();
    let n = target.n_target();
    if total > n {
        return Err(DataError::Size {
            needed: total,
            available: n,
        });
    }
    let picked = rand::seq::index::sample(rng, n, total).into_vec();
    let mut owner = vec![0usize; total];
    let mut slot = 0;
    for (t, &k) in per_task_counts.iter().enumerate() {
        for _ in 0..k {
            owner[slot] = t;
            slot += 1;
        }
    }
    let mut pairs: Vec<(usize, usize)> = picked.into_iter().zip(owner).collect();
    pairs.sort_unstable_by_key(|&(row, _)| row);
    let indices: Vec<usize> = pairs.iter().map(|&(row, _)| row).collect();
    let mut masks = vec![vec![false; total]; target.n_tasks];
    for (j, &(_, t)) in pairs.iter().enumerate() {
        masks[t][j] = true;
    }
    Ok(target.clone().with_context(indices, masks))
}
