//! Finite-difference gradient verification.
//!
//! The checker is the independent route against the analytic backward pass:
//! it only ever calls the forward builder, perturbing one input element at a
//! time with central differences, and never touches [`Graph::backward`]
//! internals.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - fd| / (abs_tol + rel_tol * max(|analytic|, |fd|))`
    /// over all checked elements; at most 1.0 when the check passes.
    pub max_ratio: f64,
    /// Location of the worst element, for diagnostics.
    pub worst: String,
    pub pass: bool,
}

/// Central-difference gradient of a scalar function of flat inputs.
///
/// `eps` is scaled per element by `max(1, |x|)`.
pub fn fd_gradient(
    f: &mut dyn FnMut(&[Vec<f64>]) -> f64,
    inputs: &[Vec<f64>],
    eps: f64,
) -> Vec<Vec<f64>> {
    let mut work: Vec<Vec<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let x = inputs[i][j];
            let h = eps * x.abs().max(1.0);
            work[i][j] = x + h;
            let fp = f(&work);
            work[i][j] = x - h;
            let fm = f(&work);
            work[i][j] = x;
            gi[j] = (fp - fm) / (2.0 * h);
        }
        grads.push(gi);
    }
    work.clone_from_slice(inputs);
    grads
}

/// Compares the analytic gradients of `build` against finite differences.
///
/// `build` must construct a scalar loss from leaves created in input order
/// and be deterministic (fix any sampling noise inside the closure). All
/// supplied inputs are treated as differentiable.
pub fn check_gradients(
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
    inputs: &[Tensor<f64>],
    eps: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> GradCheckReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).numel(), 1, "builder must produce a scalar");
    let grads = g.backward(loss);
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            grads
                .get(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inputs[i].numel()])
        })
        .collect();

    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape.clone()).collect();
    let mut eval = |flat: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = flat
            .iter()
            .zip(&shapes)
            .map(|(data, shape)| {
                g.leaf(Tensor::new(shape.clone(), data.clone()).unwrap().with_grad())
            })
            .collect();
        let loss = build(&mut g, &vars);
        g.value(loss).values[0]
    };
    let flat: Vec<Vec<f64>> = inputs.iter().map(|t| t.values.clone()).collect();
    let fd = fd_gradient(&mut eval, &flat, eps);

    let mut max_ratio = 0.0f64;
    let mut worst = String::from("(none)");
    for i in 0..analytic.len() {
        for j in 0..analytic[i].len() {
            let a = analytic[i][j];
            let f = fd[i][j];
            let denom = abs_tol + rel_tol * a.abs().max(f.abs());
            let ratio = (a - f).abs() / denom;
            if ratio > max_ratio {
                max_ratio = ratio;
                worst = format!("input {i} element {j}: analytic {a:.6e}, fd {f:.6e}");
            }
        }
    }
    GradCheckReport {
        max_ratio,
        worst,
        pass: max_ratio <= 1.0,
    }
}

/// Default central-difference step for fp64 checks.
pub const DEFAULT_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_known_quadratic() {
        // f(x) = sum(x^2) has gradient 2x.
        let mut f = |inp: &[Vec<f64>]| inp[0].iter().map(|v| v * v).sum::<f64>();
        let inputs = vec![vec![1.0, -2.0, 0.5]];
        let g = fd_gradient(&mut f, &inputs, 1e-6);
        for (got, x) in g[0].iter().zip(&inputs[0]) {
            assert!((got - 2.0 * x).abs() < 1e-6);
        }
    }

    #[test]
    fn checker_flags_wrong_gradients() {
        // relu has an analytic branch at zero; moving an input across the
        // kink with a huge eps makes fd and analytic disagree.
        let build = |g: &mut Graph<f64>, vars: &[Var]| {
            let r = g.relu(vars[0]);
            g.sum_all(r)
        };
        let near_kink = Tensor::new(vec![2], vec![1e-7, 5.0]).unwrap();
        let report = check_gradients(&build, &[near_kink], 1e-3, 1e-6, 1e-9);
        assert!(!report.pass, "expected kink to break fd agreement");
    }

    #[test]
    fn checker_passes_smooth_composite() {
        let build = |g: &mut Graph<f64>, vars: &[Var]| {
            let s = g.softplus(vars[0]);
            let q = g.square(s);
            g.sum_all(q)
        };
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let report = check_gradients(&build, &[x], DEFAULT_EPS, 1e-6, 1e-9);
        assert!(report.pass, "worst: {}", report.worst);
    }
}
