//! Monte-Carlo predictive sampling.
//!
//! One graph serves a whole sample budget: the encoders run once, then each
//! latent draw decodes its own predictive parameter set. The hierarchical
//! family draws ancestrally (every global draw spawns its own per-task
//! draws); flat families draw from their single latent level; the
//! deterministic-only ablation has nothing to draw and decodes once.

use super::forward::{Predictive, Side, TaskPredictive};
use super::view::StackedBatch;
use super::{LatentStructure, Model, ModelError, ModelFamily};
use crate::autodiff::{BoundParams, Graph, Real, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// How to turn latent distributions into predictive parameter sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Ancestral sampling with the given per-level budgets.
    Sample { n_z: usize, n_v: usize },
    /// Posterior means at every level; exactly one parameter set.
    Map,
}

/// One task's predictive parameters as plain numbers, `n` values per point.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskParams {
    /// Per-point mean and variance, each of length `n`.
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    /// Per-point class probabilities, row-major `[n, classes]`.
    Categorical { probs: Vec<f64>, classes: usize },
}

/// Predictive parameters of one sample set, indexed `[family][task]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveParams {
    pub per_family: Vec<Vec<TaskParams>>,
}

pub(crate) fn normal_noise<F: Real>(rng: &mut ChaCha8Rng, len: usize) -> Vec<F> {
    (0..len)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            F::from_f64(x)
        })
        .collect()
}

impl<F: Real> Model<F> {
    /// Builds predictive parameter sets conditioned on the stacked context.
    /// The number of sets follows the variant's latent levels: `n_z * n_v`
    /// for the hierarchical family, `n_v` for per-task-only latents, `n_z`
    /// for global-only latents, and one for the deterministic ablation or
    /// [`PredictMode::Map`].
    pub fn predict(
        &self,
        g: &mut Graph<F>,
        bp: &BoundParams<F>,
        sb: &StackedBatch<F>,
        mode: PredictMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Predictive>, ModelError> {
        let det = if self.variant.has_det_path() {
            Some(self.encode_deterministic(g, bp, sb)?)
        } else {
            None
        };
        if !self.variant.has_latent_path() {
            return Ok(vec![self.decode(g, bp, sb, None, det.as_ref())?]);
        }
        let enc = self.encode_latent_summaries(g, bp, sb, Side::Context)?;
        let (b, t, w) = (sb.b, self.dims.n_tasks, self.dims.width);

        let hierarchical = self.variant.family == ModelFamily::Mtnp
            && self.variant.latent_structure == LatentStructure::Hierarchical;
        let global_only = self.variant.family == ModelFamily::Jtnp
            || (self.variant.family == ModelFamily::Mtnp
                && self.variant.latent_structure == LatentStructure::GlobalOnly);

        let mut sets = Vec::new();
        if global_only {
            let zd = self.z_dist(g, bp, &enc);
            let draws: Vec<Var> = match mode {
                PredictMode::Map => vec![zd.mean],
                PredictMode::Sample { n_z, .. } => (0..n_z)
                    .map(|_| g.reparam_sample(zd.mean, zd.var, &normal_noise(rng, b * w)))
                    .collect(),
            };
            for z in draws {
                let lat = if self.variant.family == ModelFamily::Jtnp {
                    z
                } else {
                    self.fan_global_to_tasks(g, z)
                };
                sets.push(self.decode(g, bp, sb, Some(lat), det.as_ref())?);
            }
        } else if hierarchical {
            let zd = self.z_dist(g, bp, &enc);
            let z_draws: Vec<Var> = match mode {
                PredictMode::Map => vec![zd.mean],
                PredictMode::Sample { n_z, .. } => (0..n_z)
                    .map(|_| g.reparam_sample(zd.mean, zd.var, &normal_noise(rng, b * w)))
                    .collect(),
            };
            for z in z_draws {
                let vd = self.v_dist(g, bp, &enc, Some(z), b);
                let v_draws: Vec<Var> = match mode {
                    PredictMode::Map => vec![vd.mean],
                    PredictMode::Sample { n_v, .. } => (0..n_v)
                        .map(|_| g.reparam_sample(vd.mean, vd.var, &normal_noise(rng, b * t * w)))
                        .collect(),
                };
                for v in v_draws {
                    sets.push(self.decode(g, bp, sb, Some(v), det.as_ref())?);
                }
            }
        } else {
            let vd = self.v_dist(g, bp, &enc, None, b);
            let draws: Vec<Var> = match mode {
                PredictMode::Map => vec![vd.mean],
                PredictMode::Sample { n_v, .. } => (0..n_v)
                    .map(|_| g.reparam_sample(vd.mean, vd.var, &normal_noise(rng, b * t * w)))
                    .collect(),
            };
            for v in draws {
                sets.push(self.decode(g, bp, sb, Some(v), det.as_ref())?);
            }
        }
        Ok(sets)
    }

    /// Runs [`Model::predict`] in a private graph and extracts plain-number
    /// parameters, dropping the graph before returning.
    pub fn predict_params(
        &self,
        sb: &StackedBatch<F>,
        mode: PredictMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<PredictiveParams>, ModelError> {
        let mut g = Graph::new();
        let bp = self.params.bind(&mut g, false);
        let sets = self.predict(&mut g, &bp, sb, mode, rng)?;
        Ok(sets.iter().map(|p| extract_params(&g, p, sb)).collect())
    }
}

/// Reads one decoded parameter set out of the graph as `[family][task]`
/// numbers, undoing the layout differences between sharing modes.
pub fn extract_params<F: Real>(
    g: &Graph<F>,
    pred: &Predictive,
    sb: &StackedBatch<F>,
) -> PredictiveParams {
    let (b, t, n) = (sb.b, sb.t, sb.n);
    let grab = |values: &[F], start: usize, stride: usize| -> Vec<f64> {
        (0..n).map(|i| values[start + i * stride].as_f64()).collect()
    };
    let mut per_family = Vec::with_capacity(b);
    for fam in 0..b {
        let mut tasks = Vec::with_capacity(t);
        for task in 0..t {
            let params = match pred {
                Predictive::Stacked { mean, var } => {
                    let mv = &g.value(*mean).values;
                    let vv = &g.value(*var).values;
                    let start = (fam * t + task) * n;
                    TaskParams::Gaussian {
                        mean: grab(mv, start, 1),
                        var: grab(vv, start, 1),
                    }
                }
                Predictive::Joint { mean, var } => {
                    let mv = &g.value(*mean).values;
                    let vv = &g.value(*var).values;
                    let start = fam * n * t + task;
                    TaskParams::Gaussian {
                        mean: grab(mv, start, t),
                        var: grab(vv, start, t),
                    }
                }
                Predictive::PerTask(heads) => match &heads[task] {
                    TaskPredictive::Gaussian { mean, var } => {
                        let mv = &g.value(*mean).values;
                        let vv = &g.value(*var).values;
                        TaskParams::Gaussian {
                            mean: grab(mv, fam * n, 1),
                            var: grab(vv, fam * n, 1),
                        }
                    }
                    TaskPredictive::Categorical { probs } => {
                        let pv = &g.value(*probs).values;
                        let classes = g.shape(*probs)[2];
                        TaskParams::Categorical {
                            probs: pv[fam * n * classes..(fam + 1) * n * classes]
                                .iter()
                                .map(|v| v.as_f64())
                                .collect(),
                            classes,
                        }
                    }
                },
            };
            tasks.push(params);
        }
        per_family.push(tasks);
    }
    PredictiveParams { per_family }
}
