//! Seeded minibatch training with tracing and checkpointing.
//!
//! Every step derives its own stream from the run seed, so a run is a pure
//! function of (model seed, data, config): two runs with equal inputs
//! produce bit-identical parameters. Each step samples a family minibatch,
//! one context size shared by the whole batch, and per-family context
//! masks, then takes one Adam step on the variant's bound.

use super::elbo::{build_elbo, LatentDraws};
use super::schedule::{kl_weight, learning_rate, LrDecay, ScheduleError};
use crate::autodiff::{adam_step, AdamState, Graph, OptimError, Real, Var};
use crate::datasets::{derive_seed, sample_context_mask, DataError, MultiTaskBatch};
use crate::models::view::StackedBatch;
use crate::models::{Model, ModelError, ModelFamily};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};

/// Errors that abort a training run.
#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    Data(DataError),
    Schedule(ScheduleError),
    Optim(OptimError),
    /// The loss left the finite range; the batch seed reproduces the step.
    NonFiniteLoss { step: u64, batch_seed: u64 },
    Io(std::io::Error),
    Config { message: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Data(e) => write!(f, "{e}"),
            TrainError::Schedule(e) => write!(f, "{e}"),
            TrainError::Optim(e) => write!(f, "{e}"),
            TrainError::NonFiniteLoss { step, batch_seed } => write!(
                f,
                "loss became non-finite at step {step}; reproduce with batch seed {batch_seed}"
            ),
            TrainError::Io(e) => write!(f, "{e}"),
            TrainError::Config { message } => write!(f, "invalid training config: {message}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

impl From<ScheduleError> for TrainError {
    fn from(e: ScheduleError) -> Self {
        TrainError::Schedule(e)
    }
}

impl From<OptimError> for TrainError {
    fn from(e: OptimError) -> Self {
        TrainError::Optim(e)
    }
}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

/// Knobs of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: u64,
    pub base_lr: f64,
    pub batch_size: usize,
    /// Learning-rate warmup steps.
    pub warmup: u64,
    /// KL-weight ramp steps.
    pub kl_ramp: u64,
    pub lr_decay: LrDecay,
    /// Probability that a context label is dropped.
    pub gamma: f64,
    /// Context size is drawn uniformly from this inclusive range, once per
    /// step for the whole minibatch.
    pub m_min: usize,
    pub m_max: usize,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    pub seed: u64,
    /// Train on this many target rows per family instead of all of them.
    pub target_subsample: Option<usize>,
    pub trace_every: u64,
    /// Extra checkpoints during the run; the final step always saves.
    pub checkpoint_every: Option<u64>,
    pub run_id: String,
    /// Destination for checkpoints and the trace; `None` keeps everything
    /// in memory.
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Full-scale defaults for the synthetic function families.
    pub fn synthetic(seed: u64) -> Self {
        TrainConfig {
            iters: 300_000,
            base_lr: 2.5e-4,
            batch_size: 24,
            warmup: 1000,
            kl_ramp: 10_000,
            lr_decay: LrDecay::InverseSqrt,
            gamma: 0.5,
            m_min: 5,
            m_max: 50,
            clip: Some(10.0),
            seed,
            target_subsample: None,
            trace_every: 100,
            checkpoint_every: None,
            run_id: "run".into(),
            out_dir: None,
        }
    }

    /// Full-scale defaults for the weather table.
    pub fn weather(seed: u64) -> Self {
        TrainConfig {
            iters: 50_000,
            batch_size: 16,
            m_min: 5,
            m_max: 20,
            ..Self::synthetic(seed)
        }
    }
}

/// One logged step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    /// The optimized scalar: bound per observed target label.
    pub loss: f64,
    /// Reconstruction term per observed target label.
    pub recon: f64,
    /// Global-level KL per family; 0 when the variant has none.
    pub kl_z: f64,
    /// Per-task KL summed over tasks, per family; 0 when absent.
    pub kl_v_total: f64,
    pub lr: f64,
    pub beta: f64,
}

/// Result of a completed run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    pub final_step: u64,
}

/// Checkpoint file path for a run at a step.
pub fn checkpoint_path(dir: &Path, run_id: &str, step: u64) -> PathBuf {
    dir.join(format!("{run_id}_{step}.ckpt"))
}

/// Trace file path for a run.
pub fn trace_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}_trace.csv"))
}

fn validate_config<F: Real>(
    model: &Model<F>,
    families: &[MultiTaskBatch<f64>],
    config: &TrainConfig,
) -> Result<(), TrainError> {
    let fail = |message: &str| {
        Err(TrainError::Config {
            message: message.into(),
        })
    };
    if config.iters == 0 {
        return fail("iters must be positive");
    }
    if config.batch_size == 0 || config.batch_size > families.len() {
        return Err(TrainError::Config {
            message: format!(
                "batch size {} must lie in 1..={} (the family count)",
                config.batch_size,
                families.len()
            ),
        });
    }
    if config.m_min == 0 || config.m_min > config.m_max {
        return fail("context-size range must satisfy 1 <= m_min <= m_max");
    }
    if !(0.0..=1.0).contains(&config.gamma) {
        return fail("gamma must lie in [0, 1]");
    }
    if model.variant.family == ModelFamily::Jtnp && config.gamma != 0.0 {
        return fail("the joint family trains on complete contexts only; set gamma to 0");
    }
    if config.trace_every == 0 {
        return fail("trace_every must be positive");
    }
    if let Some(k) = config.target_subsample {
        if config.m_max > k {
            return fail("m_max cannot exceed the target subsample size");
        }
    }
    Ok(())
}

fn subsample_target(
    family: &MultiTaskBatch<f64>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> MultiTaskBatch<f64> {
    let n = family.n_target();
    let mut rows = rand::seq::index::sample(rng, n, k).into_vec();
    rows.sort_unstable();
    let x_dim = family.x_dim;
    let mut x = Vec::with_capacity(k * x_dim);
    for &i in &rows {
        x.extend_from_slice(&family.x_target[i * x_dim..(i + 1) * x_dim]);
    }
    let y: Vec<Vec<f64>> = family
        .y_target
        .iter()
        .map(|col| rows.iter().map(|&i| col[i]).collect())
        .collect();
    MultiTaskBatch::from_complete_target(x, y, x_dim)
}

fn assemble_batch(
    families: &[MultiTaskBatch<f64>],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MultiTaskBatch<f64>>, TrainError> {
    let picks = rand::seq::index::sample(rng, families.len(), config.batch_size).into_vec();
    let m = rng.gen_range(config.m_min..=config.m_max);
    let mut out = Vec::with_capacity(config.batch_size);
    for i in picks {
        let family = &families[i];
        let target = match config.target_subsample {
            Some(k) if k < family.n_target() => subsample_target(family, k, rng),
            _ => family.clone(),
        };
        out.push(sample_context_mask(rng, &target, m, config.gamma)?);
    }
    Ok(out)
}

/// Runs seeded minibatch optimization of the model's bound over the given
/// families. Emits a trace row every `trace_every` steps (plus the first
/// and last), checkpoints at the configured interval and at the end, and
/// aborts with the offending batch seed if the loss leaves the finite
/// range.
pub fn train_loop<F: Real>(
    model: &mut Model<F>,
    families: &[MultiTaskBatch<f64>],
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    validate_config(model, families, config)?;
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut adam = AdamState::new(&model.params);
    let mut trace = Vec::new();
    for step in 1..=config.iters {
        let batch_seed = derive_seed(config.seed, "batch", step);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let beta = kl_weight(step, config.kl_ramp);
        let lr = learning_rate(config.base_lr, config.warmup, config.lr_decay, step)?;

        let batch = assemble_batch(families, config, &mut rng)?;
        let sb = StackedBatch::<F>::stack(&batch)?;
        let draws = LatentDraws::for_model(model, sb.b, &mut rng);

        let (row, mut grads) = {
            let mut g = Graph::new();
            let bp = model.params.bind(&mut g, true);
            let terms = build_elbo(model, &mut g, &bp, &sb, &draws, beta)?;
            let scalar = |v: Var| g.value(v).values[0].as_f64();
            let loss = scalar(terms.loss);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step, batch_seed });
            }
            let grads = g.backward(terms.loss);
            let bufs: Vec<Vec<F>> = bp
                .vars()
                .iter()
                .zip(model.params.tensors())
                .map(|(&v, t)| {
                    grads
                        .get(v)
                        .map(<[F]>::to_vec)
                        .unwrap_or_else(|| vec![F::zero(); t.numel()])
                })
                .collect();
            let per_family = 1.0 / sb.b as f64;
            let row = TraceRow {
                step,
                loss,
                recon: scalar(terms.recon) / terms.observed as f64,
                kl_z: terms.kl_z.map_or(0.0, &scalar) * per_family,
                kl_v_total: terms.kl_v.map_or(0.0, &scalar) * per_family,
                lr,
                beta,
            };
            (row, bufs)
        };

        adam_step(&mut model.params, &mut grads, &mut adam, lr, config.clip)?;

        if step == 1 || step % config.trace_every == 0 || step == config.iters {
            trace.push(row);
        }
        if let (Some(dir), Some(every)) = (&config.out_dir, config.checkpoint_every) {
            if step % every == 0 && step != config.iters {
                model.save(&checkpoint_path(dir, &config.run_id, step), step)?;
            }
        }
    }

    if let Some(dir) = &config.out_dir {
        model.save(&checkpoint_path(dir, &config.run_id, config.iters), config.iters)?;
        write_trace(&trace_path(dir, &config.run_id), &trace)?;
    }
    Ok(TrainOutcome {
        trace,
        final_step: config.iters,
    })
}

/// Writes trace rows as CSV with the fixed column set
/// `step,loss,recon,kl_z,kl_v_total,lr,beta`.
pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    for row in rows {
        w.serialize(row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> TrainError {
    TrainError::Io(std::io::Error::other(e))
}
