//! Named parameter store, initialization, and the Adam update.

use super::graph::{Graph, Var};
use super::real::Real;
use super::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt;

/// Optimizer failures that should abort a run.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    /// A gradient contained NaN or infinity; training has diverged.
    NonFiniteGradient { param: String },
    /// A parameter value became non-finite after the update.
    NonFiniteParam { param: String },
    /// Gradient vector count does not match the parameter count.
    GradientCount { expected: usize, got: usize },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonFiniteGradient { param } => {
                write!(f, "training diverged: non-finite gradient for `{param}`")
            }
            OptimError::NonFiniteParam { param } => {
                write!(f, "training diverged: non-finite value in `{param}`")
            }
            OptimError::GradientCount { expected, got } => {
                write!(f, "expected {expected} gradient buffers, got {got}")
            }
        }
    }
}

impl std::error::Error for OptimError {}

/// Ordered, named collection of trainable tensors.
///
/// Registration order is the canonical order used for gradient buffers and
/// checkpoint serialization, so model builders must register parameters in a
/// deterministic sequence.
#[derive(Debug, Clone)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a tensor under a unique name. Panics on duplicates: parameter
    /// names are assigned by the model builder, never by user input.
    pub fn register(&mut self, name: &str, tensor: Tensor<F>) {
        assert!(
            !self.index.contains_key(name),
            "parameter `{name}` registered twice"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces the stored value of an existing parameter; shape must match.
    pub fn set_value(&mut self, name: &str, values: Vec<F>) {
        let i = self.index[name];
        assert_eq!(
            values.len(),
            self.tensors[i].numel(),
            "value length for `{name}`"
        );
        self.tensors[i].values = values;
    }

    /// Pairs externally created graph vars, one per parameter in canonical
    /// order, with the name table. For callers that manage leafing
    /// themselves, such as finite-difference checkers.
    pub fn bind_vars<'a>(&'a self, vars: Vec<Var>) -> BoundParams<'a, F> {
        assert_eq!(vars.len(), self.tensors.len(), "one var per parameter");
        BoundParams { set: self, vars }
    }

    /// Registers every parameter as a graph leaf, in canonical order.
    /// Frozen tensors stay frozen; `trainable: false` freezes everything
    /// for forward-only graphs.
    pub fn bind<'a>(&'a self, g: &mut Graph<F>, trainable: bool) -> BoundParams<'a, F> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut leaf = t.clone();
                leaf.requires_grad = trainable && t.requires_grad;
                g.leaf(leaf)
            })
            .collect();
        BoundParams { set: self, vars }
    }
}

/// A [`ParamSet`] registered into one graph; resolves names to graph vars.
pub struct BoundParams<'a, F> {
    set: &'a ParamSet<F>,
    vars: Vec<Var>,
}

impl<'a, F: Real> BoundParams<'a, F> {
    /// Graph var for a parameter. Panics on unknown names: lookups come from
    /// the same builder that registered them.
    pub fn var(&self, name: &str) -> Var {
        match self.set.position(name) {
            Some(i) => self.vars[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }

    /// Vars in canonical order, aligned with gradient buffers.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Trainable linear layer weight of shape `[fan_in, fan_out]`, drawn from
/// `U(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
pub fn init_linear<F: Real>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
    init_uniform_fanin(rng, vec![fan_in, fan_out], fan_in)
}

/// Trainable tensor of the given shape drawn from
/// `U(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
pub fn init_uniform_fanin<F: Real>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor {
        shape,
        values,
        requires_grad: true,
    }
}

/// First/second moment buffers for Adam.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> AdamState<F> {
    /// Fresh state shaped like the parameter set, with the standard
    /// moment decays (0.9, 0.999) and epsilon 1e-8.
    pub fn new(params: &ParamSet<F>) -> Self {
        AdamState {
            m: params.tensors().iter().map(|t| vec![F::zero(); t.numel()]).collect(),
            v: params.tensors().iter().map(|t| vec![F::zero(); t.numel()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Scales all gradients in place so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<F: Real>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// One Adam update over the whole parameter set.
///
/// `grads` must be in canonical parameter order. With `clip` set, gradients
/// are first rescaled to the given global-norm bound. Non-finite gradients
/// or resulting parameters abort with a training-diverged error.
pub fn adam_step<F: Real>(
    params: &mut ParamSet<F>,
    grads: &mut [Vec<F>],
    state: &mut AdamState<F>,
    lr: f64,
    clip: Option<f64>,
) -> Result<(), OptimError> {
    if grads.len() != params.len() {
        return Err(OptimError::GradientCount {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient {
                param: params.names()[i].clone(),
            });
        }
    }
    if let Some(c) = clip {
        clip_global_norm(grads, c);
    }
    state.step += 1;
    let t = state.step;
    let b1 = F::from_f64(state.beta1);
    let b2 = F::from_f64(state.beta2);
    let one = F::one();
    let bc1 = F::from_f64(1.0 - state.beta1.powi(t as i32));
    let bc2 = F::from_f64(1.0 - state.beta2.powi(t as i32));
    let lr_f = F::from_f64(lr);
    let eps = F::from_f64(state.eps);
    for (i, g) in grads.iter().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let theta = &mut params.tensors_mut()[i].values;
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            theta[j] = theta[j] - lr_f * mhat / (vhat.sqrt() + eps);
        }
    }
    for (i, t) in params.tensors().iter().enumerate() {
        if !t.all_finite() {
            return Err(OptimError::NonFiniteParam {
                param: params.names()[i].clone(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_order_is_canonical() {
        let mut ps = ParamSet::<f64>::new();
        ps.register("b", Tensor::zeros(vec![2]));
        ps.register("a", Tensor::zeros(vec![3]));
        assert_eq!(ps.names(), &["b".to_string(), "a".to_string()]);
        assert_eq!(ps.position("a"), Some(1));
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_registration_panics() {
        let mut ps = ParamSet::<f64>::new();
        ps.register("w", Tensor::zeros(vec![1]));
        ps.register("w", Tensor::zeros(vec![1]));
    }

    #[test]
    fn init_respects_fanin_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t: Tensor<f64> = init_linear(&mut rng, 16, 8);
        let bound = 1.0 / 4.0;
        assert!(t.values.iter().all(|v| v.abs() < bound));
        assert_eq!(t.shape, vec![16, 8]);
    }

    #[test]
    fn clip_shrinks_to_bound() {
        let mut grads = vec![vec![3.0f64, 4.0]];
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let after: f64 = grads[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_nan_gradients() {
        let mut ps = ParamSet::<f64>::new();
        ps.register("w", Tensor::zeros(vec![2]));
        let mut st = AdamState::new(&ps);
        let mut grads = vec![vec![f64::NAN, 0.0]];
        let err = adam_step(&mut ps, &mut grads, &mut st, 1e-3, None).unwrap_err();
        assert!(matches!(err, OptimError::NonFiniteGradient { .. }));
    }
}
