//! Model families over function sets: single-task (STNP), joint-task
//! (JTNP), and hierarchical multi-task (MTNP), plus their ablation variants.
//!
//! A [`Model`] owns a parameter set laid out deterministically from a seed.
//! Forward passes live in [`forward`] (encoding and decoding graph pieces)
//! and [`predict`] (Monte-Carlo predictive sampling); [`view`] stacks
//! per-family batches into the rectangular tensors the graphs consume.

pub mod forward;
pub mod predict;
pub mod view;

pub use predict::{PredictMode, PredictiveParams, TaskParams};
pub use view::StackedBatch;

use crate::autodiff::{
    load_checkpoint, register_attention_stack, register_cross_attention_stack, register_mlp,
    register_pool, save_checkpoint, AttnStackSpec, CheckpointError, CheckpointMeta, MlpSpec,
    ParamSet, PoolMode, Real, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Model family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Stnp,
    Jtnp,
    Mtnp,
}

/// Which latent levels an MTNP keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentStructure {
    /// Global z plus per-task v conditioned on z.
    Hierarchical,
    /// Global z only; the decoder consumes z directly.
    GlobalOnly,
    /// Per-task v only, inferred from the task's own context.
    TaskOnly,
}

/// Which encoder paths feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPaths {
    Both,
    LatentOnly,
    DeterministicOnly,
}

/// Whether per-task paths share one parameter set or keep one per task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSharing {
    Shared,
    TaskSpecific,
}

/// Task-identity encoding added to shared per-task paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskEmbeddingKind {
    Learnable,
    /// Frozen one-hot rows; requires width ≥ task count.
    Onehot,
}

/// Output head type of one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Continuous,
    Categorical(usize),
}

/// Complete architectural variant description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub family: ModelFamily,
    pub latent_structure: LatentStructure,
    pub encoder_paths: EncoderPaths,
    pub sharing: ParamSharing,
    pub pooling: PoolKind,
    pub pre_pool_self_attention: bool,
    pub task_embedding: TaskEmbeddingKind,
}

/// Serializable mirror of the pooling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Mean,
    Pma,
}

impl PoolKind {
    pub fn mode(self) -> PoolMode {
        match self {
            PoolKind::Mean => PoolMode::Mean,
            PoolKind::Pma => PoolMode::Pma,
        }
    }
}

impl ModelVariant {
    /// Per-task model with task-specific parameters (the 1-D baseline).
    pub fn stnp() -> Self {
        ModelVariant {
            family: ModelFamily::Stnp,
            latent_structure: LatentStructure::Hierarchical,
            encoder_paths: EncoderPaths::Both,
            sharing: ParamSharing::TaskSpecific,
            pooling: PoolKind::Pma,
            pre_pool_self_attention: true,
            task_embedding: TaskEmbeddingKind::Learnable,
        }
    }

    /// Joint model over the product output space.
    pub fn jtnp() -> Self {
        ModelVariant {
            family: ModelFamily::Jtnp,
            sharing: ParamSharing::Shared,
            ..Self::stnp()
        }
    }

    /// Hierarchical multi-task model with shared per-task paths.
    pub fn mtnp() -> Self {
        ModelVariant {
            family: ModelFamily::Mtnp,
            sharing: ParamSharing::Shared,
            ..Self::stnp()
        }
    }

    pub fn with_latent_structure(mut self, s: LatentStructure) -> Self {
        self.latent_structure = s;
        self
    }

    pub fn has_z(self) -> bool {
        if self.encoder_paths == EncoderPaths::DeterministicOnly {
            return false;
        }
        match self.family {
            ModelFamily::Stnp => false,
            ModelFamily::Jtnp => true,
            ModelFamily::Mtnp => self.latent_structure != LatentStructure::TaskOnly,
        }
    }

    pub fn has_v(self) -> bool {
        if self.encoder_paths == EncoderPaths::DeterministicOnly {
            return false;
        }
        match self.family {
            ModelFamily::Stnp => true,
            ModelFamily::Jtnp => false,
            ModelFamily::Mtnp => self.latent_structure != LatentStructure::GlobalOnly,
        }
    }

    pub fn has_latent_path(self) -> bool {
        self.encoder_paths != EncoderPaths::DeterministicOnly
    }

    pub fn has_det_path(self) -> bool {
        self.encoder_paths != EncoderPaths::LatentOnly
    }

    fn uses_task_embedding(self) -> bool {
        self.family != ModelFamily::Jtnp && self.sharing == ParamSharing::Shared
    }
}

/// Width and head configuration; layer depths are architectural constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub x_dim: usize,
    pub n_tasks: usize,
    pub width: usize,
    pub heads: usize,
}

impl ModelDims {
    pub fn new(x_dim: usize, n_tasks: usize, width: usize, heads: usize) -> Self {
        ModelDims {
            x_dim,
            n_tasks,
            width,
            heads,
        }
    }
}

/// Depth of the context-row embedders (value embeddings of both paths).
pub const EMBED_LAYERS: usize = 3;
/// Depth of the input embedders (decoder queries and attention keys).
pub const QUERY_LAYERS: usize = 1;
/// Trunk depth of the decoder head (plus one linear output layer = 5).
pub const DECODER_TRUNK_LAYERS: usize = 4;
/// Trunk depth of the latent heads (plus one linear output layer = 2).
pub const LATENT_TRUNK_LAYERS: usize = 1;
/// Blocks in per-task (and joint) set attention stacks.
pub const SET_BLOCKS: usize = 3;
/// Blocks in across-task attention stacks.
pub const ACROSS_BLOCKS: usize = 2;

/// Errors from model construction, forward passes, and checkpoint exchange.
#[derive(Debug)]
pub enum ModelError {
    Config { message: String },
    IncompleteContext,
    EmptyTaskContext { task: usize },
    MissingDeterministic,
    CheckpointMismatch { message: String },
    Checkpoint(CheckpointError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config { message } => write!(f, "invalid model config: {message}"),
            ModelError::IncompleteContext => {
                write!(f, "this variant requires a complete context: every task observed at every context point")
            }
            ModelError::EmptyTaskContext { task } => {
                write!(f, "task {task} has no observed context point")
            }
            ModelError::MissingDeterministic => {
                write!(f, "deterministic path enabled but no representations were supplied")
            }
            ModelError::CheckpointMismatch { message } => {
                write!(f, "checkpoint does not match this model: {message}")
            }
            ModelError::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<CheckpointError> for ModelError {
    fn from(e: CheckpointError) -> Self {
        ModelError::Checkpoint(e)
    }
}

fn config_err<T>(message: impl Into<String>) -> Result<T, ModelError> {
    Err(ModelError::Config {
        message: message.into(),
    })
}

/// A variant plus its parameters, ready to build forward graphs.
#[derive(Debug)]
pub struct Model<F: Real> {
    pub variant: ModelVariant,
    pub dims: ModelDims,
    pub task_kinds: Vec<OutputKind>,
    pub params: ParamSet<F>,
    pub seed: u64,
}

impl<F: Real> Model<F> {
    /// Validates the variant and registers every parameter in a fixed order
    /// from the seed. Two builds from equal arguments are bit-identical.
    pub fn build(
        variant: ModelVariant,
        dims: ModelDims,
        task_kinds: Vec<OutputKind>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        validate(variant, dims, &task_kinds)?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register(variant, dims, &task_kinds, &mut ps, &mut rng);
        Ok(Model {
            variant,
            dims,
            task_kinds,
            params: ps,
            seed,
        })
    }

    /// Scope suffixes of the per-task paths: one empty scope when shared,
    /// one `.t{t}` scope per task when task-specific.
    pub fn scopes(&self) -> Vec<String> {
        scopes(self.variant, self.dims.n_tasks)
    }

    /// Canonical identity string stored in checkpoints; loads reject a
    /// mismatch.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Fingerprint<'a> {
            format: u32,
            variant: &'a ModelVariant,
            dims: &'a ModelDims,
            task_kinds: &'a [OutputKind],
        }
        serde_json::to_string(&Fingerprint {
            format: 1,
            variant: &self.variant,
            dims: &self.dims,
            task_kinds: &self.task_kinds,
        })
        .expect("fingerprint serialization cannot fail")
    }

    /// Writes parameters plus the fingerprint.
    pub fn save(&self, path: &Path, step: u64) -> Result<(), ModelError> {
        let meta = CheckpointMeta {
            step,
            fingerprint: self.fingerprint(),
        };
        save_checkpoint(path, &self.params, &meta)?;
        Ok(())
    }

    /// Loads a checkpoint into this model, rejecting fingerprint, name, or
    /// shape mismatches.
    pub fn load(&mut self, path: &Path) -> Result<u64, ModelError> {
        let (meta, arrays) = load_checkpoint(path)?;
        if meta.fingerprint != self.fingerprint() {
            return Err(ModelError::CheckpointMismatch {
                message: format!(
                    "fingerprint {} does not match expected {}",
                    meta.fingerprint,
                    self.fingerprint()
                ),
            });
        }
        if arrays.len() != self.params.len() {
            return Err(ModelError::CheckpointMismatch {
                message: format!(
                    "checkpoint has {} arrays, model has {}",
                    arrays.len(),
                    self.params.len()
                ),
            });
        }
        for (name, tensor) in arrays {
            let expected = self
                .params
                .get(&name)
                .ok_or_else(|| ModelError::CheckpointMismatch {
                    message: format!("unexpected array {name}"),
                })?;
            if expected.shape != tensor.shape {
                return Err(ModelError::CheckpointMismatch {
                    message: format!(
                        "array {name} has shape {:?}, expected {:?}",
                        tensor.shape, expected.shape
                    ),
                });
            }
            let values: Vec<F> = tensor.values.iter().map(|&v| F::from_f64(v as f64)).collect();
            self.params.set_value(&name, values);
        }
        Ok(meta.step)
    }
}

fn scopes(variant: ModelVariant, n_tasks: usize) -> Vec<String> {
    match variant.sharing {
        ParamSharing::Shared => vec![String::new()],
        ParamSharing::TaskSpecific => (0..n_tasks).map(|t| format!(".t{t}")).collect(),
    }
}

fn validate(
    variant: ModelVariant,
    dims: ModelDims,
    task_kinds: &[OutputKind],
) -> Result<(), ModelError> {
    if task_kinds.len() != dims.n_tasks {
        return config_err(format!(
            "{} task kinds for {} tasks",
            task_kinds.len(),
            dims.n_tasks
        ));
    }
    if dims.n_tasks == 0 || dims.width == 0 || dims.x_dim == 0 {
        return config_err("x_dim, n_tasks, and width must be positive");
    }
    if dims.heads == 0 || !dims.width.is_multiple_of(dims.heads) {
        return config_err(format!(
            "heads ({}) must divide width ({})",
            dims.heads, dims.width
        ));
    }
    if variant.family != ModelFamily::Mtnp
        && variant.latent_structure != LatentStructure::Hierarchical
    {
        return config_err("latent structure variants apply to the multi-task family only");
    }
    if variant.encoder_paths == EncoderPaths::DeterministicOnly
        && variant.latent_structure != LatentStructure::Hierarchical
    {
        return config_err("deterministic_only removes the latent path; latent structure must stay at its default");
    }
    if variant.family == ModelFamily::Jtnp {
        if variant.sharing == ParamSharing::TaskSpecific {
            return config_err("the joint family has no per-task paths to make task-specific");
        }
        if task_kinds.iter().any(|k| *k != OutputKind::Continuous) {
            return config_err("the joint family supports continuous tasks only");
        }
    }
    if task_kinds.iter().any(|k| *k != OutputKind::Continuous)
        && variant.sharing != ParamSharing::TaskSpecific
    {
        return config_err("categorical tasks require task-specific parameters");
    }
    if variant.uses_task_embedding()
        && variant.task_embedding == TaskEmbeddingKind::Onehot
        && dims.width < dims.n_tasks
    {
        return config_err("one-hot task embeddings need width >= task count");
    }
    Ok(())
}

/// Input width of the latent/deterministic value embedders.
fn row_width(variant: ModelVariant, dims: ModelDims) -> usize {
    match variant.family {
        ModelFamily::Jtnp => dims.x_dim + dims.n_tasks,
        _ => dims.x_dim + 1,
    }
}

/// Input width of the decoder trunk.
fn decoder_input(variant: ModelVariant, dims: ModelDims) -> usize {
    let mut d = dims.width;
    if variant.has_latent_path() {
        d += dims.width;
    }
    if variant.has_det_path() {
        d += dims.width;
    }
    d
}

fn register_gaussian_head<F: Real>(
    ps: &mut ParamSet<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    width: usize,
    output: usize,
    trunk_layers: usize,
) {
    register_mlp(
        ps,
        rng,
        &format!("{prefix}.trunk"),
        MlpSpec::new(input, width, width, trunk_layers),
    );
    register_mlp(
        ps,
        rng,
        &format!("{prefix}.mean"),
        MlpSpec::new(width, width, output, 1),
    );
    register_mlp(
        ps,
        rng,
        &format!("{prefix}.rawvar"),
        MlpSpec::new(width, width, output, 1),
    );
}

fn one_hot_embedding<F: Real>(n_tasks: usize, width: usize) -> Tensor<F> {
    let mut values = vec![F::zero(); n_tasks * width];
    for t in 0..n_tasks {
        values[t * width + t] = F::one();
    }
    Tensor {
        shape: vec![n_tasks, width],
        values,
        requires_grad: false,
    }
}

fn register<F: Real>(
    variant: ModelVariant,
    dims: ModelDims,
    task_kinds: &[OutputKind],
    ps: &mut ParamSet<F>,
    rng: &mut ChaCha8Rng,
) {
    let w = dims.width;
    let heads = dims.heads;
    let pool_mode = variant.pooling.mode();
    let set_spec = AttnStackSpec::new(w, heads, SET_BLOCKS);
    let across_spec = AttnStackSpec::new(w, heads, ACROSS_BLOCKS);
    let row_in = row_width(variant, dims);
    let scopes = scopes(variant, dims.n_tasks);

    if variant.uses_task_embedding() {
        match variant.task_embedding {
            TaskEmbeddingKind::Learnable => ps.register(
                "task_embed",
                crate::autodiff::init_uniform_fanin(rng, vec![dims.n_tasks, w], w),
            ),
            TaskEmbeddingKind::Onehot => ps.register("task_embed", one_hot_embedding(dims.n_tasks, w)),
        }
    }

    if variant.has_latent_path() {
        for s in &scopes {
            register_mlp(ps, rng, &format!("psi_s{s}"), MlpSpec::new(row_in, w, w, EMBED_LAYERS));
            if variant.pre_pool_self_attention {
                register_attention_stack(ps, rng, &format!("set_lat{s}"), set_spec);
            }
            register_pool(ps, rng, &format!("pool_lat{s}"), pool_mode, w, heads);
        }
        if variant.family == ModelFamily::Mtnp
            && variant.latent_structure != LatentStructure::TaskOnly
        {
            register_attention_stack(ps, rng, "set_task", across_spec);
            register_pool(ps, rng, "pool_task", pool_mode, w, heads);
        }
        if variant.has_z() {
            register_gaussian_head(ps, rng, "psi_z", w, w, w, LATENT_TRUNK_LAYERS);
        }
        if variant.has_v() {
            let v_in = if variant.family == ModelFamily::Mtnp
                && variant.latent_structure == LatentStructure::Hierarchical
            {
                2 * w
            } else {
                w
            };
            for s in &scopes {
                register_gaussian_head(ps, rng, &format!("psi_v{s}"), v_in, w, w, LATENT_TRUNK_LAYERS);
            }
        }
    }

    if variant.has_det_path() {
        for s in &scopes {
            register_mlp(ps, rng, &format!("psi_d{s}"), MlpSpec::new(row_in, w, w, EMBED_LAYERS));
            register_mlp(ps, rng, &format!("psi_q{s}"), MlpSpec::new(dims.x_dim, w, w, QUERY_LAYERS));
            register_cross_attention_stack(ps, rng, &format!("det_cross{s}"), set_spec);
        }
        if variant.family == ModelFamily::Mtnp {
            register_attention_stack(ps, rng, "det_task", across_spec);
        }
    }

    let dec_in = decoder_input(variant, dims);
    for s in &scopes {
        register_mlp(ps, rng, &format!("psi_w{s}"), MlpSpec::new(dims.x_dim, w, w, QUERY_LAYERS));
    }
    match (variant.family, variant.sharing) {
        (ModelFamily::Jtnp, _) => {
            register_gaussian_head(ps, rng, "psi_y", dec_in, w, dims.n_tasks, DECODER_TRUNK_LAYERS);
        }
        (_, ParamSharing::Shared) => {
            register_gaussian_head(ps, rng, "psi_y", dec_in, w, 1, DECODER_TRUNK_LAYERS);
        }
        (_, ParamSharing::TaskSpecific) => {
            for (t, s) in scopes.iter().enumerate() {
                match task_kinds[t] {
                    OutputKind::Continuous => {
                        register_gaussian_head(ps, rng, &format!("psi_y{s}"), dec_in, w, 1, DECODER_TRUNK_LAYERS);
                    }
                    OutputKind::Categorical(classes) => {
                        register_mlp(
                            ps,
                            rng,
                            &format!("psi_y{s}.trunk"),
                            MlpSpec::new(dec_in, w, w, DECODER_TRUNK_LAYERS),
                        );
                        register_mlp(
                            ps,
                            rng,
                            &format!("psi_y{s}.logits"),
                            MlpSpec::new(w, w, classes, 1),
                        );
                    }
                }
            }
        }
    }
}
