//! Monte-Carlo predictive scoring and the metrics CSV.
//!
//! A model is scored by drawing seeded contexts from each family's target
//! set, sampling predictive parameter sets, reducing them to one point
//! prediction per target, and averaging squared error and predictive NLL
//! across families. Every quantity is a pure function of (parameters,
//! dataset, seed), so re-running reproduces the CSV byte for byte.

use super::EvalError;
use crate::autodiff::Real;
use crate::datasets::{derive_seed, sample_context_mask, MultiTaskBatch};
use crate::models::{Model, PredictMode, PredictiveParams, StackedBatch, TaskParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How sampled parameter sets reduce to one point prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Average of the sample means (posterior predictive mean estimate).
    Mean,
    /// One pass with posterior-mean latents, no sampling.
    Map,
    /// The sample minimizing target MSE; an oracle upper bound.
    Best,
}

/// Monte-Carlo sampling knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub n_z: usize,
    pub n_v: usize,
    pub mode: EvalMode,
    /// Families stacked per graph; bounds peak activation memory.
    pub chunk: usize,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions {
            n_z: 5,
            n_v: 5,
            mode: EvalMode::Mean,
            chunk: 5,
        }
    }
}

/// Sampled parameter sets plus their point-prediction reduction.
#[derive(Debug, Clone)]
pub struct McPrediction {
    /// `[family][task]` point predictions: per-point means for continuous
    /// tasks, row-major probabilities for categorical ones.
    pub point: Vec<Vec<Vec<f64>>>,
    /// One parameter set per Monte-Carlo sample.
    pub samples: Vec<PredictiveParams>,
}

/// Draws predictive parameter sets for every family and reduces them to
/// point predictions according to the mode. Families are stacked in chunks,
/// consuming the noise stream in family order.
pub fn mc_predictive<F: Real>(
    model: &Model<F>,
    batches: &[MultiTaskBatch<f64>],
    rng: &mut ChaCha8Rng,
    opts: &McOptions,
) -> Result<McPrediction, EvalError> {
    if batches.is_empty() {
        return Err(EvalError::Domain {
            message: "no families to evaluate".into(),
        });
    }
    let mode = match opts.mode {
        EvalMode::Map => PredictMode::Map,
        EvalMode::Mean | EvalMode::Best => PredictMode::Sample {
            n_z: opts.n_z,
            n_v: opts.n_v,
        },
    };
    let mut samples: Vec<PredictiveParams> = Vec::new();
    for chunk in batches.chunks(opts.chunk.max(1)) {
        let sb = StackedBatch::<F>::stack(chunk)?;
        let sets = model.predict_params(&sb, mode, rng)?;
        if samples.is_empty() {
            samples = sets;
        } else {
            for (acc, set) in samples.iter_mut().zip(sets) {
                acc.per_family.extend(set.per_family);
            }
        }
    }
    let point = point_predictions(&samples, batches, opts.mode)?;
    Ok(McPrediction { point, samples })
}

fn point_predictions(
    samples: &[PredictiveParams],
    batches: &[MultiTaskBatch<f64>],
    mode: EvalMode,
) -> Result<Vec<Vec<Vec<f64>>>, EvalError> {
    let mut out = Vec::with_capacity(batches.len());
    for (fam, batch) in batches.iter().enumerate() {
        let mut tasks = Vec::with_capacity(batch.n_tasks);
        for t in 0..batch.n_tasks {
            let across: Vec<&TaskParams> =
                samples.iter().map(|s| &s.per_family[fam][t]).collect();
            tasks.push(reduce_task(&across, batch, t, mode)?);
        }
        out.push(tasks);
    }
    Ok(out)
}

fn reduce_task(
    across: &[&TaskParams],
    batch: &MultiTaskBatch<f64>,
    t: usize,
    mode: EvalMode,
) -> Result<Vec<f64>, EvalError> {
    let k = across.len() as f64;
    match across[0] {
        TaskParams::Gaussian { mean, .. } => match mode {
            EvalMode::Mean | EvalMode::Map => {
                let mut avg = vec![0.0; mean.len()];
                for params in across {
                    let TaskParams::Gaussian { mean, .. } = params else {
                        return Err(mixed_kinds());
                    };
                    for (a, &m) in avg.iter_mut().zip(mean) {
                        *a += m / k;
                    }
                }
                Ok(avg)
            }
            EvalMode::Best => {
                let truth = &batch.y_target[t];
                let mask = &batch.target_mask[t];
                let best = across
                    .iter()
                    .map(|params| {
                        let TaskParams::Gaussian { mean, .. } = params else {
                            return Err(mixed_kinds());
                        };
                        Ok(masked_mse(mean, truth, mask))
                    })
                    .collect::<Result<Vec<f64>, EvalError>>()?
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .expect("at least one sample");
                let TaskParams::Gaussian { mean, .. } = across[best] else {
                    unreachable!()
                };
                Ok(mean.clone())
            }
        },
        TaskParams::Categorical { probs, .. } => match mode {
            EvalMode::Mean | EvalMode::Map => {
                let mut avg = vec![0.0; probs.len()];
                for params in across {
                    let TaskParams::Categorical { probs, .. } = params else {
                        return Err(mixed_kinds());
                    };
                    for (a, &p) in avg.iter_mut().zip(probs) {
                        *a += p / k;
                    }
                }
                Ok(avg)
            }
            EvalMode::Best => Err(EvalError::Domain {
                message: "best-sample selection is defined by MSE on continuous tasks".into(),
            }),
        },
    }
}

fn mixed_kinds() -> EvalError {
    EvalError::Domain {
        message: "samples mix continuous and categorical parameters".into(),
    }
}

/// Mean squared error over all points.
pub fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    assert!(!pred.is_empty());
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&p, &y)| (p - y) * (p - y))
        .sum();
    sum / pred.len() as f64
}

/// Mean squared error over the points the mask marks observed.
pub fn masked_mse(pred: &[f64], truth: &[f64], mask: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    assert_eq!(pred.len(), mask.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&p, &y), &keep) in pred.iter().zip(truth).zip(mask) {
        if keep {
            sum += (p - y) * (p - y);
            count += 1;
        }
    }
    assert!(count > 0, "no observed points to score");
    sum / count as f64
}

/// MSE divided by the squared family scale.
pub fn normalized_mse(pred: &[f64], truth: &[f64], scale: f64) -> Result<f64, EvalError> {
    if scale.abs() < 1e-12 {
        return Err(EvalError::Domain {
            message: "normalization scale is zero".into(),
        });
    }
    Ok(mse(pred, truth) / (scale * scale))
}

/// Predictive negative log-likelihood over Monte-Carlo samples, averaged
/// over observed points. Returns `(mixture, per_sample_mean)`: the mixture
/// form scores `-log mean_k p_k(y)` per point; the secondary estimator
/// averages each sample's own NLL. By concavity of the logarithm the
/// mixture value never exceeds the per-sample mean.
pub fn nll_metric(
    across: &[&TaskParams],
    truth: &[f64],
    mask: &[bool],
) -> Result<(f64, f64), EvalError> {
    if across.is_empty() {
        return Err(EvalError::Domain {
            message: "need at least one predictive sample".into(),
        });
    }
    let k = across.len();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut mixture_sum = 0.0;
    let mut per_sample_sum = 0.0;
    let mut count = 0usize;
    for (i, (&y, &keep)) in truth.iter().zip(mask).enumerate() {
        if !keep {
            continue;
        }
        let log_ps: Vec<f64> = across
            .iter()
            .map(|params| match params {
                TaskParams::Gaussian { mean, var } => {
                    let d = y - mean[i];
                    Ok(-0.5 * (ln_2pi + var[i].ln() + d * d / var[i]))
                }
                TaskParams::Categorical { probs, classes } => {
                    let class = y as usize;
                    if class >= *classes {
                        return Err(EvalError::Domain {
                            message: format!("label {class} outside {classes} classes"),
                        });
                    }
                    Ok(probs[i * classes + class].ln())
                }
            })
            .collect::<Result<_, EvalError>>()?;
        let max = log_ps.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + log_ps.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        mixture_sum += -(lse - (k as f64).ln());
        per_sample_sum += log_ps.iter().map(|&l| -l).sum::<f64>() / k as f64;
        count += 1;
    }
    if count == 0 {
        return Err(EvalError::Domain {
            message: "no observed points to score".into(),
        });
    }
    Ok((mixture_sum / count as f64, per_sample_sum / count as f64))
}

/// The seeded evaluation protocol for one (m, gamma) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Context points per family.
    pub m: usize,
    /// Per-label drop probability inside the context.
    pub gamma: f64,
    /// One full evaluation pass per seed; reports aggregate across them.
    pub context_seeds: Vec<u64>,
    pub n_z: usize,
    pub n_v: usize,
    pub mode: EvalMode,
    /// Families stacked per prediction graph.
    pub chunk: usize,
    /// Score every `target_stride`-th target row.
    pub target_stride: usize,
}

impl EvalProtocol {
    /// Reporting defaults: 25 samples, 5 context seeds, every target row.
    pub fn table(m: usize, gamma: f64) -> Self {
        EvalProtocol {
            m,
            gamma,
            context_seeds: vec![1, 2, 3, 4, 5],
            n_z: 5,
            n_v: 5,
            mode: EvalMode::Mean,
            chunk: 5,
            target_stride: 1,
        }
    }
}

/// Labels attached to every metrics row.
#[derive(Debug, Clone, Copy)]
pub struct EvalTags<'a> {
    pub dataset: &'a str,
    pub variant: &'a str,
    pub task_names: &'a [String],
}

/// One metrics CSV row: one (task, context seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub variant: String,
    pub task: String,
    pub m: usize,
    pub gamma: f64,
    pub seed: u64,
    pub mse: f64,
    pub nmse: f64,
    pub nll: f64,
    /// Secondary NLL estimator (mean of per-sample NLLs); kept out of the
    /// CSV, whose column set is fixed.
    #[serde(skip)]
    pub nll_sample_mean: f64,
}

/// Scores the model on bare target families at one (m, gamma) cell, one
/// row per (task, seed). `scales` supplies per-family normalization for
/// `nmse`; families without a natural scale pass `None` and get `nmse =
/// mse`.
pub fn evaluate<F: Real>(
    model: &Model<F>,
    families: &[MultiTaskBatch<f64>],
    scales: Option<&[f64]>,
    tags: &EvalTags,
    protocol: &EvalProtocol,
) -> Result<Vec<MetricsRow>, EvalError> {
    if families.is_empty() {
        return Err(EvalError::Domain {
            message: "no families to evaluate".into(),
        });
    }
    let n_tasks = families[0].n_tasks;
    if tags.task_names.len() != n_tasks {
        return Err(EvalError::Domain {
            message: format!(
                "{} task names for {} tasks",
                tags.task_names.len(),
                n_tasks
            ),
        });
    }
    if let Some(s) = scales {
        if s.len() != families.len() {
            return Err(EvalError::Domain {
                message: format!("{} scales for {} families", s.len(), families.len()),
            });
        }
    }
    let strided: Vec<MultiTaskBatch<f64>> = families
        .iter()
        .map(|f| stride_targets(f, protocol.target_stride))
        .collect();
    let opts = McOptions {
        n_z: protocol.n_z,
        n_v: protocol.n_v,
        mode: protocol.mode,
        chunk: protocol.chunk,
    };
    let mut rows = Vec::new();
    for &seed in &protocol.context_seeds {
        let mut ctx_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval_ctx", 0));
        let ctx: Vec<MultiTaskBatch<f64>> = strided
            .iter()
            .map(|f| sample_context_mask(&mut ctx_rng, f, protocol.m, protocol.gamma))
            .collect::<Result<_, _>>()?;
        let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(seed, "eval_mc", 0));
        let pred = mc_predictive(model, &ctx, &mut noise, &opts)?;
        for t in 0..n_tasks {
            let mut mse_sum = 0.0;
            let mut nmse_sum = 0.0;
            let mut nll_sum = 0.0;
            let mut nll_sample_sum = 0.0;
            for (fam, batch) in ctx.iter().enumerate() {
                let truth = &batch.y_target[t];
                let mask = &batch.target_mask[t];
                let err = masked_mse(&pred.point[fam][t], truth, mask);
                let scale = scales.map_or(1.0, |s| s[fam]);
                if scale.abs() < 1e-12 {
                    return Err(EvalError::Domain {
                        message: "normalization scale is zero".into(),
                    });
                }
                let across: Vec<&TaskParams> =
                    pred.samples.iter().map(|s| &s.per_family[fam][t]).collect();
                let (mixture, per_sample) = nll_metric(&across, truth, mask)?;
                mse_sum += err;
                nmse_sum += err / (scale * scale);
                nll_sum += mixture;
                nll_sample_sum += per_sample;
            }
            let fams = ctx.len() as f64;
            rows.push(MetricsRow {
                dataset: tags.dataset.to_string(),
                variant: tags.variant.to_string(),
                task: tags.task_names[t].clone(),
                m: protocol.m,
                gamma: protocol.gamma,
                seed,
                mse: mse_sum / fams,
                nmse: nmse_sum / fams,
                nll: nll_sum / fams,
                nll_sample_mean: nll_sample_sum / fams,
            });
        }
    }
    Ok(rows)
}

/// Keeps every `stride`-th target row of a bare family.
pub fn stride_targets(family: &MultiTaskBatch<f64>, stride: usize) -> MultiTaskBatch<f64> {
    assert!(stride >= 1);
    assert!(
        family.context_idx.is_empty(),
        "stride applies to bare target families"
    );
    if stride == 1 {
        return family.clone();
    }
    let n = family.n_target();
    let rows: Vec<usize> = (0..n).step_by(stride).collect();
    let d = family.x_dim;
    let mut x = Vec::with_capacity(rows.len() * d);
    for &i in &rows {
        x.extend_from_slice(&family.x_target[i * d..(i + 1) * d]);
    }
    let y: Vec<Vec<f64>> = family
        .y_target
        .iter()
        .map(|col| rows.iter().map(|&i| col[i]).collect())
        .collect();
    let mask: Vec<Vec<bool>> = family
        .target_mask
        .iter()
        .map(|col| rows.iter().map(|&i| col[i]).collect())
        .collect();
    let mut out = MultiTaskBatch::from_complete_target(x, y, d);
    out.target_mask = mask;
    out
}

/// Aggregate of one (dataset, variant, task, m, gamma) cell across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub dataset: String,
    pub variant: String,
    pub task: String,
    pub m: usize,
    pub gamma: f64,
    pub seeds: usize,
    pub mse_mean: f64,
    pub mse_std: Option<f64>,
    pub nmse_mean: f64,
    pub nmse_std: Option<f64>,
    pub nll_mean: f64,
    pub nll_std: Option<f64>,
}

/// Groups rows by (dataset, variant, task, m, gamma) in first-appearance
/// order and reduces across seeds to mean and sample standard deviation;
/// the deviation is omitted for single-seed cells.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<MetricsSummary> {
    let mut keys: Vec<(String, String, String, usize, f64)> = Vec::new();
    let mut groups: Vec<Vec<&MetricsRow>> = Vec::new();
    for row in rows {
        let key = (
            row.dataset.clone(),
            row.variant.clone(),
            row.task.clone(),
            row.m,
            row.gamma,
        );
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(row),
            None => {
                keys.push(key);
                groups.push(vec![row]);
            }
        }
    }
    keys.into_iter()
        .zip(groups)
        .map(|((dataset, variant, task, m, gamma), group)| {
            let stat = |get: &dyn Fn(&MetricsRow) -> f64| {
                let vals: Vec<f64> = group.iter().map(|r| get(r)).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let std = (vals.len() > 1).then(|| {
                    let ss: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum();
                    (ss / (vals.len() - 1) as f64).sqrt()
                });
                (mean, std)
            };
            let (mse_mean, mse_std) = stat(&|r| r.mse);
            let (nmse_mean, nmse_std) = stat(&|r| r.nmse);
            let (nll_mean, nll_std) = stat(&|r| r.nll);
            MetricsSummary {
                dataset,
                variant,
                task,
                m,
                gamma,
                seeds: group.len(),
                mse_mean,
                mse_std,
                nmse_mean,
                nmse_std,
                nll_mean,
                nll_std,
            }
        })
        .collect()
}

/// Writes rows with the fixed column set
/// `dataset,variant,task,m,gamma,seed,mse,nmse,nll`.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    for row in rows {
        w.serialize(row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> EvalError {
    EvalError::Io(std::io::Error::other(e))
}
