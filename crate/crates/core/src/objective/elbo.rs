//! Evidence lower bounds for every model variant.
//!
//! Each bound uses a single reparameterized sample per latent level. The
//! posterior side conditions on the full target set, the prior side on the
//! context, and both sides share encoder parameters. In the hierarchical
//! bound the per-task posterior and prior are conditioned on the same
//! global sample, so collapsing the context onto the target set collapses
//! every KL term to exactly zero.
//!
//! The optimized scalar is the negative bound divided by the number of
//! observed target labels; the reported reconstruction and KL terms stay
//! unnormalized sums so they can be rescaled freely downstream.

use crate::autodiff::{BoundParams, Graph, Real, Var};
use crate::models::forward::{Predictive, Side, TaskPredictive};
use crate::models::predict::normal_noise;
use crate::models::view::StackedBatch;
use crate::models::{LatentStructure, Model, ModelError, ModelFamily};
use rand_chacha::ChaCha8Rng;

/// Fixed standard-normal draws for the reparameterized samples, so a loss
/// is a deterministic function of parameters and data.
#[derive(Debug, Clone)]
pub struct LatentDraws<F> {
    /// Global-level noise, length `B * width`.
    pub z: Option<Vec<F>>,
    /// Per-task-level noise, length `B * T * width`.
    pub v: Option<Vec<F>>,
}

impl<F: Real> LatentDraws<F> {
    /// Draws exactly the noise the variant's latent levels consume.
    pub fn for_model(model: &Model<F>, b: usize, rng: &mut ChaCha8Rng) -> Self {
        let (t, w) = (model.dims.n_tasks, model.dims.width);
        LatentDraws {
            z: model.variant.has_z().then(|| normal_noise(rng, b * w)),
            v: model.variant.has_v().then(|| normal_noise(rng, b * t * w)),
        }
    }

    /// No noise; valid only for the deterministic-only ablation.
    pub fn none() -> Self {
        LatentDraws { z: None, v: None }
    }
}

/// The assembled bound: the loss scalar to optimize plus its reported
/// pieces (unnormalized sums; the KL terms are `None` for variants without
/// the corresponding latent level).
#[derive(Debug, Clone)]
pub struct ElboTerms {
    pub loss: Var,
    pub recon: Var,
    pub kl_z: Option<Var>,
    pub kl_v: Option<Var>,
    /// Observed target labels; the loss normalizer.
    pub observed: usize,
}

/// Builds the loss for any variant by dispatching on its family.
pub fn build_elbo<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    sb: &StackedBatch<F>,
    draws: &LatentDraws<F>,
    beta: f64,
) -> Result<ElboTerms, ModelError> {
    match model.variant.family {
        ModelFamily::Mtnp => elbo_mtnp(model, g, bp, sb, draws, beta),
        ModelFamily::Stnp | ModelFamily::Jtnp => elbo_np(model, g, bp, sb, draws, beta),
    }
}

/// Bound for the single-level families: per-task latents (STNP) or one
/// joint latent (JTNP).
pub fn elbo_np<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    sb: &StackedBatch<F>,
    draws: &LatentDraws<F>,
    beta: f64,
) -> Result<ElboTerms, ModelError> {
    if !model.variant.has_latent_path() {
        return det_only_elbo(model, g, bp, sb);
    }
    match model.variant.family {
        ModelFamily::Stnp => flat_v_elbo(model, g, bp, sb, draws, beta),
        ModelFamily::Jtnp => flat_z_elbo(model, g, bp, sb, draws, beta),
        ModelFamily::Mtnp => Err(ModelError::Config {
            message: "the multi-task family has its own bound".into(),
        }),
    }
}

/// Bound for the multi-task family and its latent-structure ablations.
pub fn elbo_mtnp<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    sb: &StackedBatch<F>,
    draws: &LatentDraws<F>,
    beta: f64,
) -> Result<ElboTerms, ModelError> {
    if model.variant.family != ModelFamily::Mtnp {
        return Err(ModelError::Config {
            message: "this bound covers the multi-task family".into(),
        });
    }
    if !model.variant.has_latent_path() {
        return det_only_elbo(model, g, bp, sb);
    }
    match model.variant.latent_structure {
        LatentStructure::Hierarchical => hierarchical_elbo(model, g, bp, sb, draws, beta),
        LatentStructure::GlobalOnly => flat_z_elbo(model, g, bp, sb, draws, beta),
        LatentStructure::TaskOnly => flat_v_elbo(model, g, bp, sb, draws, beta),
    }
}

fn hierarchical_elbo<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    sb: &StackedBatch<F>,
    draws: &LatentDraws<F>,
    beta: f64,
) -> Result<ElboTerms, ModelError> {
    let enc_post = model.encode_latent_summaries(g, bp, sb, Side::Target)?;
    let enc_prior = model.encode_latent_summaries(g, bp, sb, Side::Context)?;
    let z_post = model.z_dist(g, bp, &enc_post);
    let z_prior = model.z_dist(g, bp, &enc_prior);
    let z_noise = draws.z.as_ref().expect("hierarchical bound needs global noise");
    let z = g.reparam_sample(z_post.mean, z_post.var, z_noise);

    // Both per-task distributions condition on the same global sample.
    let v_post = model.v_dist(g, bp, &enc_post, Some(z), sb.b);
    let v_prior = model.v_dist(g, bp, &enc_prior, Some(z), sb.b);
    let v_noise = draws.v.as_ref().expect("hierarchical bound needs per-task noise");
    let v = g.reparam_sample(v_post.mean, v_post.var, v_noise);

    let det = decode_side_det(model, g, bp, sb)?;
    let pred = model.decode(g, bp, sb, Some(v), det.as_ref())?;
    let recon = recon_nll(g, sb, &pred)?;

    let kl_z_elems = g.gaussian_kl_diag(z_post.mean, z_post.var, z_prior.mean, z_prior.var);
    let kl_z = g.sum_all(kl_z_elems);
    let kl_v_elems = g.gaussian_kl_diag(v_post.mean, v_post.var, v_prior.mean, v_prior.var);
    let kl_v = g.sum_all(kl_v_elems);

    Ok(assemble(g, sb, recon, Some(kl_z), Some(kl_v), beta))
}

fn flat_v_elbo<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    sb: &StackedBatch<F>,
    draws: &LatentDraws<F>,
    beta: f64,
) -> Result<ElboTerms, ModelError> {
    let enc_post = model.encode_latent_summaries(g, bp, sb, Side::Target)?;
    let enc_prior = model.encode_latent_summaries(g, bp, sb, Side::Context)?;
    let v_post = model.v_dist(g, bp, &enc_post, None, sb.b);
    let v_prior = model.v_dist(g, bp, &enc_prior, None, sb.b);
    let v_noise = draws.v.as_ref().expect("per-task bound needs per-task noise");
    let v = g.reparam_sample(v_post.mean, v_post.var, v_noise);

    let det = decode_side_det(model, g, bp, sb)?;
    let pred = model.decode(g, bp, sb, Some(v), det.as_ref())?;
    let recon = recon_nll(g, sb, &pred)?;

    let kl_elems = g.gaussian_kl_diag(v_post.mean, v_post.var, v_prior.mean, v_prior.var);
    let kl_v = g.sum_all(kl_elems);
    Ok(assemble(g, sb, recon, None, Some(kl_v), beta))
}

fn flat_z_elbo<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    sb: &StackedBatch<F>,
    draws: &LatentDraws<F>,
    beta: f64,
) -> Result<ElboTerms, ModelError> {
    let enc_post = model.encode_latent_summaries(g, bp, sb, Side::Target)?;
    let enc_prior = model.encode_latent_summaries(g, bp, sb, Side::Context)?;
    let z_post = model.z_dist(g, bp, &enc_post);
    let z_prior = model.z_dist(g, bp, &enc_prior);
    let z_noise = draws.z.as_ref().expect("global bound needs global noise");
    let z = g.reparam_sample(z_post.mean, z_post.var, z_noise);

    let lat = if model.variant.family == ModelFamily::Jtnp {
        z
    } else {
        model.fan_global_to_tasks(g, z)
    };
    let det = decode_side_det(model, g, bp, sb)?;
    let pred = model.decode(g, bp, sb, Some(lat), det.as_ref())?;
    let recon = recon_nll(g, sb, &pred)?;

    let kl_elems = g.gaussian_kl_diag(z_post.mean, z_post.var, z_prior.mean, z_prior.var);
    let kl_z = g.sum_all(kl_elems);
    Ok(assemble(g, sb, recon, Some(kl_z), None, beta))
}

fn det_only_elbo<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    sb: &StackedBatch<F>,
) -> Result<ElboTerms, ModelError> {
    let det = model.encode_deterministic(g, bp, sb)?;
    let pred = model.decode(g, bp, sb, None, Some(&det))?;
    let recon = recon_nll(g, sb, &pred)?;
    Ok(assemble(g, sb, recon, None, None, 0.0))
}

fn decode_side_det<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    bp: &BoundParams<F>,
    sb: &StackedBatch<F>,
) -> Result<Option<crate::models::forward::DetRep>, ModelError> {
    if model.variant.has_det_path() {
        Ok(Some(model.encode_deterministic(g, bp, sb)?))
    } else {
        Ok(None)
    }
}

/// Negative log-likelihood of the observed target labels, summed.
fn recon_nll<F: Real>(
    g: &mut Graph<F>,
    sb: &StackedBatch<F>,
    pred: &Predictive,
) -> Result<Var, ModelError> {
    match pred {
        Predictive::Stacked { mean, var } => {
            let nll = g.gaussian_nll_diag(*mean, *var, &sb.tgt_y);
            Ok(g.masked_sum_all(nll, Some(&sb.tgt_mask)))
        }
        Predictive::PerTask(heads) => {
            let mut total: Option<Var> = None;
            for (task, head) in heads.iter().enumerate() {
                let term = match head {
                    TaskPredictive::Gaussian { mean, var } => {
                        let nll = g.gaussian_nll_diag(*mean, *var, &sb.tgt_y_t[task]);
                        g.masked_sum_all(nll, Some(&sb.tgt_mask_t[task]))
                    }
                    TaskPredictive::Categorical { probs } => {
                        let classes = sb.target_classes(task);
                        let nll = g.categorical_nll(*probs, &classes);
                        g.masked_sum_all(nll, Some(&sb.tgt_mask_t[task]))
                    }
                };
                total = Some(match total {
                    Some(acc) => g.add(acc, term),
                    None => term,
                });
            }
            Ok(total.expect("at least one task"))
        }
        Predictive::Joint { mean, var } => {
            let y = sb.tgt_y_joint.as_ref().ok_or(ModelError::IncompleteContext)?;
            let nll = g.gaussian_nll_diag(*mean, *var, y);
            Ok(g.masked_sum_all(nll, None))
        }
    }
}

fn assemble<F: Real>(
    g: &mut Graph<F>,
    sb: &StackedBatch<F>,
    recon: Var,
    kl_z: Option<Var>,
    kl_v: Option<Var>,
    beta: f64,
) -> ElboTerms {
    let observed = sb.observed_target_count();
    let beta_f = F::from_f64(beta);
    let mut total = recon;
    if let Some(k) = kl_z {
        let scaled = g.scale(k, beta_f);
        total = g.add(total, scaled);
    }
    if let Some(k) = kl_v {
        let scaled = g.scale(k, beta_f);
        total = g.add(total, scaled);
    }
    let loss = g.scale(total, F::from_f64(1.0 / observed as f64));
    ElboTerms {
        loss,
        recon,
        kl_z,
        kl_v,
        observed,
    }
}
