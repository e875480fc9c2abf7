//! Closed-form oracles for the numerical building blocks.
//!
//! Every assertion here compares the implementation against a value derived
//! independently in the test: a hand-computed constant, a formula written
//! out elementwise, or a statistic with a known expectation. The
//! probabilistic graph ops, the optimizer update, the training schedules,
//! the scoring metrics, and the synthetic generator are each pinned this
//! way so a silent change in any of them fails loudly.

use mtnp_core::autodiff::{adam_step, clip_global_norm, AdamState, OptimError, ParamSet};
use mtnp_core::datasets::synthetic::{
    sample_family_params, uniform_grid, CorrelationMode, TaskKind, SYNTHETIC_TASKS,
};
use mtnp_core::datasets::{derive_seed, sample_context_mask, MultiTaskBatch};
use mtnp_core::evaluation::metrics::masked_mse;
use mtnp_core::evaluation::{mse, nll_metric, normalized_mse};
use mtnp_core::models::TaskParams;
use mtnp_core::objective::{kl_weight, learning_rate, LrDecay, ScheduleError};
use mtnp_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.8378770664093453;

fn tensor(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
}

// ---- probabilistic ops ----

#[test]
fn kl_of_unit_shift_is_exactly_half() {
    // KL(N(1,1) || N(0,1)) = (ln 1 + (1 + 1)/1 - 1) / 2 = 1/2.
    let mut g = Graph::<f64>::new();
    let mq = g.leaf(tensor(&[1], &[1.0]));
    let vq = g.leaf(tensor(&[1], &[1.0]));
    let mp = g.leaf(tensor(&[1], &[0.0]));
    let vp = g.leaf(tensor(&[1], &[1.0]));
    let kl = g.gaussian_kl_diag(mq, vq, mp, vp);
    assert!((g.value(kl).values[0] - 0.5).abs() < 1e-15);
}

#[test]
fn kl_matches_the_elementwise_formula() {
    let mq = [0.3, -1.2, 2.0, 0.0];
    let vq = [0.5, 1.7, 0.9, 2.2];
    let mp = [-0.4, 0.6, 2.0, 1.1];
    let vp = [1.3, 0.8, 0.9, 0.4];
    let mut g = Graph::<f64>::new();
    let a = g.leaf(tensor(&[4], &mq));
    let b = g.leaf(tensor(&[4], &vq));
    let c = g.leaf(tensor(&[4], &mp));
    let d = g.leaf(tensor(&[4], &vp));
    let kl = g.gaussian_kl_diag(a, b, c, d);
    for i in 0..4 {
        let want =
            0.5 * ((vp[i] / vq[i]).ln() + (vq[i] + (mq[i] - mp[i]).powi(2)) / vp[i] - 1.0);
        let got = g.value(kl).values[i];
        assert!(
            (got - want).abs() < 1e-14,
            "element {i}: got {got}, want {want}"
        );
    }
}

#[test]
fn kl_vanishes_only_when_distributions_coincide() {
    let mut g = Graph::<f64>::new();
    let m = g.leaf(tensor(&[2], &[0.7, -1.3]));
    let v = g.leaf(tensor(&[2], &[1.9, 0.4]));
    let same = g.gaussian_kl_diag(m, v, m, v);
    for &x in &g.value(same).values {
        assert_eq!(x, 0.0, "KL of a distribution against itself");
    }

    // KL is asymmetric: swapping the arguments changes the value.
    let m2 = g.leaf(tensor(&[2], &[0.0, 0.0]));
    let v2 = g.leaf(tensor(&[2], &[3.0, 0.2]));
    let fwd = g.gaussian_kl_diag(m, v, m2, v2);
    let rev = g.gaussian_kl_diag(m2, v2, m, v);
    for i in 0..2 {
        let f = g.value(fwd).values[i];
        let r = g.value(rev).values[i];
        assert!(f > 0.0 && r > 0.0);
        assert!((f - r).abs() > 1e-3, "element {i}: {f} vs {r}");
    }
}

#[test]
fn nll_of_a_standard_normal_at_its_mean() {
    // -ln phi(0) = ln(2 pi) / 2.
    let mut g = Graph::<f64>::new();
    let m = g.leaf(tensor(&[1], &[0.0]));
    let v = g.leaf(tensor(&[1], &[1.0]));
    let nll = g.gaussian_nll_diag(m, v, &tensor(&[1], &[0.0]));
    assert!((g.value(nll).values[0] - 0.5 * LN_2PI).abs() < 1e-15);
}

#[test]
fn quadrupling_the_variance_adds_ln_two_at_the_mean() {
    // At y = mean the quadratic term is zero, so the NLL difference between
    // variance 4 and variance 1 is exactly ln(4)/2 = ln 2.
    let mut g = Graph::<f64>::new();
    let m = g.leaf(tensor(&[1], &[0.3]));
    let v1 = g.leaf(tensor(&[1], &[1.0]));
    let v4 = g.leaf(tensor(&[1], &[4.0]));
    let y = tensor(&[1], &[0.3]);
    let narrow = g.gaussian_nll_diag(m, v1, &y);
    let wide = g.gaussian_nll_diag(m, v4, &y);
    let diff = g.value(wide).values[0] - g.value(narrow).values[0];
    assert!((diff - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn nll_matches_the_elementwise_formula() {
    let mean = [0.4, -0.9, 1.5];
    let var = [0.6, 2.0, 0.3];
    let y = [0.1, -1.4, 2.2];
    let mut g = Graph::<f64>::new();
    let m = g.leaf(tensor(&[3], &mean));
    let v = g.leaf(tensor(&[3], &var));
    let nll = g.gaussian_nll_diag(m, v, &tensor(&[3], &y));
    for i in 0..3 {
        let d = y[i] - mean[i];
        let want = 0.5 * (LN_2PI + var[i].ln()) + d * d / (2.0 * var[i]);
        let got = g.value(nll).values[i];
        assert!(
            (got - want).abs() < 1e-14,
            "element {i}: got {got}, want {want}"
        );
    }
}

#[test]
fn categorical_nll_on_hand_built_rows() {
    // Row 0: uniform over four classes, any pick costs ln 4. Row 1: all the
    // mass on the chosen class, zero cost. Row 2: the general -ln p.
    let probs = [
        0.25, 0.25, 0.25, 0.25, //
        1.0, 0.0, 0.0, 0.0, //
        0.1, 0.2, 0.3, 0.4,
    ];
    let classes = [2usize, 0, 3];
    let mut g = Graph::<f64>::new();
    let p = g.leaf(tensor(&[3, 4], &probs));
    let nll = g.categorical_nll(p, &classes);
    let got = &g.value(nll).values;
    assert!((got[0] - 4.0f64.ln()).abs() < 1e-15);
    assert_eq!(got[1], 0.0);
    assert!((got[2] - -(0.4f64.ln())).abs() < 1e-15);
}

#[test]
fn reparam_is_the_location_scale_map() {
    // mean + sqrt(var) * noise, elementwise; chosen so every term is exact.
    let mut g = Graph::<f64>::new();
    let m = g.leaf(tensor(&[3], &[0.5, -1.0, 2.0]));
    let v = g.leaf(tensor(&[3], &[4.0, 0.25, 1.0]));
    let s = g.reparam_sample(m, v, &[1.5, -2.0, 0.0]);
    assert_eq!(g.value(s).values, vec![3.5, -2.0, 2.0]);
}

#[test]
fn reparam_moments_match_the_target_gaussian() {
    // Standard-normal noise pushed through mean 0.7, variance 2.25 must
    // come out with those moments.
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let noise: Vec<f64> = (0..n)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng))
        .collect();
    let mut g = Graph::<f64>::new();
    let m = g.leaf(tensor(&[n], &vec![0.7; n]));
    let v = g.leaf(tensor(&[n], &vec![2.25; n]));
    let s = g.reparam_sample(m, v, &noise);
    let vals = &g.value(s).values;
    let mean: f64 = vals.iter().sum::<f64>() / n as f64;
    let var: f64 = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    assert!((mean - 0.7).abs() < 0.02, "sample mean {mean}");
    assert!((var - 2.25).abs() < 0.05, "sample variance {var}");
}

// ---- optimizer ----

fn two_tensor_params() -> ParamSet<f64> {
    let mut ps = ParamSet::new();
    let mut w = tensor(&[2], &[1.0, -2.0]);
    w.requires_grad = true;
    let mut b = tensor(&[1], &[0.5]);
    b.requires_grad = true;
    ps.register("w", w);
    ps.register("b", b);
    ps
}

#[test]
fn adam_first_step_has_a_closed_form() {
    // Bias correction cancels the moment decay on step one, leaving
    // theta - lr * g / (|g| + eps). Gradients are powers of two so both
    // routes round identically.
    let mut ps = two_tensor_params();
    let mut state = AdamState::new(&ps);
    let lr = 1e-2;
    let g = [vec![0.5, -0.25], vec![1.0]];
    let mut grads = g.to_vec();
    adam_step(&mut ps, &mut grads, &mut state, lr, None).unwrap();

    let before = [vec![1.0, -2.0], vec![0.5]];
    for (k, name) in ["w", "b"].iter().enumerate() {
        let after = &ps.get(name).unwrap().values;
        for (j, &theta) in after.iter().enumerate() {
            let want = before[k][j] - lr * g[k][j] / (g[k][j].abs() + 1e-8);
            assert!(
                (theta - want).abs() < 1e-15,
                "{name}[{j}]: got {theta}, want {want}"
            );
        }
    }
    assert_eq!(state.step_count(), 1);
}

#[test]
fn adam_trajectory_matches_a_scalar_reimplementation() {
    // Three steps with varying gradients against the textbook recurrence
    // written out on plain f64 scalars.
    let mut ps = two_tensor_params();
    let mut state = AdamState::new(&ps);
    let lr = 3e-3;
    let steps = [
        [vec![0.5, -0.25], vec![1.0]],
        [vec![-0.4, 0.8], vec![-0.3]],
        [vec![0.1, 0.1], vec![0.7]],
    ];
    for g in &steps {
        let mut grads = g.to_vec();
        adam_step(&mut ps, &mut grads, &mut state, lr, None).unwrap();
    }

    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut theta = [vec![1.0, -2.0], vec![0.5]];
    let mut m = [vec![0.0, 0.0], vec![0.0]];
    let mut v = [vec![0.0, 0.0], vec![0.0]];
    for (t, g) in steps.iter().enumerate() {
        let bc1 = 1.0 - beta1.powi(t as i32 + 1);
        let bc2 = 1.0 - beta2.powi(t as i32 + 1);
        for k in 0..2 {
            for j in 0..g[k].len() {
                m[k][j] = beta1 * m[k][j] + (1.0 - beta1) * g[k][j];
                v[k][j] = beta2 * v[k][j] + (1.0 - beta2) * g[k][j] * g[k][j];
                theta[k][j] -= lr * (m[k][j] / bc1) / ((v[k][j] / bc2).sqrt() + eps);
            }
        }
    }
    for (k, name) in ["w", "b"].iter().enumerate() {
        let after = &ps.get(name).unwrap().values;
        for (j, &got) in after.iter().enumerate() {
            assert!(
                (got - theta[k][j]).abs() < 1e-12,
                "{name}[{j}]: got {got}, want {}",
                theta[k][j]
            );
        }
    }
    assert_eq!(state.step_count(), 3);
}

#[test]
fn clipping_a_three_four_gradient_halves_it() {
    // Norm of [3, 4] is exactly 5; capping at 2.5 scales by one half.
    let mut grads = vec![vec![3.0f64], vec![4.0]];
    let norm = clip_global_norm(&mut grads, 2.5);
    assert_eq!(norm, 5.0);
    assert_eq!(grads, vec![vec![1.5], vec![2.0]]);

    // Under the cap nothing moves.
    let mut small = vec![vec![0.3f64, -0.4]];
    let norm = clip_global_norm(&mut small, 2.5);
    assert_eq!(norm, 0.5);
    assert_eq!(small, vec![vec![0.3, -0.4]]);
}

#[test]
fn non_finite_gradients_abort_the_update() {
    let mut ps = two_tensor_params();
    let mut state = AdamState::new(&ps);
    let mut grads = vec![vec![0.1, f64::NAN], vec![0.2]];
    let err = adam_step(&mut ps, &mut grads, &mut state, 1e-3, None).unwrap_err();
    assert!(matches!(err, OptimError::NonFiniteGradient { ref param } if param == "w"));
    // The failed call must not have touched the parameters or the clock.
    assert_eq!(ps.get("w").unwrap().values, vec![1.0, -2.0]);
    assert_eq!(state.step_count(), 0);
}

// ---- schedules ----

#[test]
fn warmup_peak_and_decay_hit_their_closed_forms() {
    let base = 2.5e-4;
    // At the warmup boundary both branches meet at exactly the base rate.
    let peak = learning_rate(base, 1000, LrDecay::InverseSqrt, 1000).unwrap();
    assert!((peak - base).abs() < 1e-18);
    // Four warmups in, inverse-sqrt decay has halved it.
    let later = learning_rate(base, 1000, LrDecay::InverseSqrt, 4000).unwrap();
    assert!((later - base / 2.0).abs() < 1e-18);
    // Mid-warmup the ramp is linear.
    let mid = learning_rate(base, 1000, LrDecay::InverseSqrt, 500).unwrap();
    assert!((mid - base / 2.0).abs() < 1e-18);
}

#[test]
fn flat_decay_holds_the_base_rate() {
    let base = 1e-3;
    assert_eq!(
        learning_rate(base, 1000, LrDecay::FlatAfterWarmup, 500).unwrap(),
        base * 0.5
    );
    assert_eq!(
        learning_rate(base, 1000, LrDecay::FlatAfterWarmup, 1000).unwrap(),
        base
    );
    assert_eq!(
        learning_rate(base, 1000, LrDecay::FlatAfterWarmup, 50_000).unwrap(),
        base
    );
}

#[test]
fn schedules_reject_step_zero() {
    assert_eq!(
        learning_rate(1e-3, 1000, LrDecay::InverseSqrt, 0),
        Err(ScheduleError::ZeroStep)
    );
}

#[test]
fn kl_ramp_is_linear_and_saturates() {
    assert_eq!(kl_weight(0, 10_000), 0.0);
    assert_eq!(kl_weight(5000, 10_000), 0.5);
    assert_eq!(kl_weight(10_000, 10_000), 1.0);
    assert_eq!(kl_weight(1_000_000, 10_000), 1.0);
    // A zero-length ramp means full weight from the first step.
    assert_eq!(kl_weight(1, 0), 1.0);
}

// ---- metrics ----

#[test]
fn mse_and_normalization_on_hand_numbers() {
    let pred = [1.0, 2.0];
    let truth = [0.0, 0.0];
    assert_eq!(mse(&pred, &truth), 2.5);
    assert_eq!(normalized_mse(&pred, &truth, 2.0).unwrap(), 0.625);
    assert!(normalized_mse(&pred, &truth, 0.0).is_err());
    assert_eq!(masked_mse(&pred, &truth, &[true, false]), 1.0);
}

#[test]
fn mixture_nll_on_two_gaussian_components() {
    // Two predictive samples at a single point y = 0: N(0,1) and N(1,4).
    // The mixture scores -ln of the average density; the secondary
    // estimator averages the per-component NLLs.
    let s1 = TaskParams::Gaussian {
        mean: vec![0.0],
        var: vec![1.0],
    };
    let s2 = TaskParams::Gaussian {
        mean: vec![1.0],
        var: vec![4.0],
    };
    let (mixture, per_sample) = nll_metric(&[&s1, &s2], &[0.0], &[true]).unwrap();

    let p1 = (-0.5 * LN_2PI).exp();
    let p2 = (-0.5 * (LN_2PI + 4.0f64.ln()) - 1.0 / 8.0).exp();
    let want_mixture = -(0.5 * (p1 + p2)).ln();
    let want_per_sample = 0.5 * ((0.5 * LN_2PI) + (0.5 * (LN_2PI + 4.0f64.ln()) + 1.0 / 8.0));
    assert!(
        (mixture - want_mixture).abs() < 1e-12,
        "mixture {mixture}, want {want_mixture}"
    );
    assert!(
        (per_sample - want_per_sample).abs() < 1e-12,
        "per-sample {per_sample}, want {want_per_sample}"
    );
    // Jensen: averaging densities before the log can only lower the NLL.
    assert!(mixture <= per_sample);
}

#[test]
fn mixture_nll_on_categorical_samples() {
    let s1 = TaskParams::Categorical {
        probs: vec![0.25, 0.25, 0.25, 0.25],
        classes: 4,
    };
    let s2 = TaskParams::Categorical {
        probs: vec![0.1, 0.2, 0.3, 0.4],
        classes: 4,
    };
    // The label is the class index, carried through the float channel.
    let (mixture, per_sample) = nll_metric(&[&s1, &s2], &[3.0], &[true]).unwrap();
    let want_mixture = -(0.5f64 * (0.25 + 0.4)).ln();
    let want_per_sample = 0.5 * (-(0.25f64.ln()) - 0.4f64.ln());
    assert!((mixture - want_mixture).abs() < 1e-12);
    assert!((per_sample - want_per_sample).abs() < 1e-12);
}

#[test]
fn nll_ignores_masked_points_and_rejects_empty_masks() {
    let s = TaskParams::Gaussian {
        mean: vec![0.0, 100.0],
        var: vec![1.0, 1.0],
    };
    // The wildly wrong second point is masked out, so only the first scores.
    let (mixture, _) = nll_metric(&[&s], &[0.0, 0.0], &[true, false]).unwrap();
    assert!((mixture - 0.5 * LN_2PI).abs() < 1e-12);
    assert!(nll_metric(&[&s], &[0.0, 0.0], &[false, false]).is_err());
}

// ---- synthetic generator ----

#[test]
fn task_channels_keep_their_order_and_shapes() {
    let names: Vec<&str> = SYNTHETIC_TASKS.iter().map(|t| t.name()).collect();
    assert_eq!(names, ["sine", "tanh", "sigmoid", "gaussian"]);
    assert!((TaskKind::Sine.apply(std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
    assert_eq!(TaskKind::Tanh.apply(0.0), 0.0);
    assert_eq!(TaskKind::Sigmoid.apply(0.0), 0.5);
    assert_eq!(TaskKind::Gaussian.apply(0.0), 1.0);
    // The bump decays symmetrically.
    assert_eq!(
        TaskKind::Gaussian.apply(1.3),
        TaskKind::Gaussian.apply(-1.3)
    );
}

#[test]
fn uniform_grid_spans_the_input_range() {
    assert_eq!(uniform_grid(2), vec![-5.0, 5.0]);
    let g = uniform_grid(11);
    let want: Vec<f64> = (0..11).map(|i| -5.0 + i as f64).collect();
    assert_eq!(g, want);
}

#[test]
fn derived_seeds_separate_streams() {
    assert_eq!(derive_seed(7, "family", 3), derive_seed(7, "family", 3));
    assert_ne!(derive_seed(7, "family", 3), derive_seed(7, "family", 4));
    assert_ne!(derive_seed(7, "family", 3), derive_seed(7, "eval_ctx", 3));
    assert_ne!(derive_seed(7, "family", 3), derive_seed(8, "family", 3));
}

#[test]
fn total_correlation_copies_the_shared_draw() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let fam = sample_family_params(&mut rng, CorrelationMode::Total, 0.1);
        for task in &fam.per_task {
            assert_eq!(task, &fam.shared);
        }
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    cov / (vx.sqrt() * vy.sqrt())
}

#[test]
fn partial_correlation_matches_the_variance_ratio() {
    // Per-task amplitude = shared + N(0, 0.1) with shared ~ U(0.5, 2), so
    // the cross-task correlation is Var(U)/(Var(U)+0.1) = 0.1875/0.2875,
    // about 0.652. Same derivation gives 0.930 for the U(-2,2) shift b.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 6000;
    let mut a0 = Vec::with_capacity(n);
    let mut a1 = Vec::with_capacity(n);
    let mut b0 = Vec::with_capacity(n);
    let mut b1 = Vec::with_capacity(n);
    for _ in 0..n {
        let fam = sample_family_params(&mut rng, CorrelationMode::Partial, 0.1);
        a0.push(fam.per_task[0].a);
        a1.push(fam.per_task[1].a);
        b0.push(fam.per_task[2].b);
        b1.push(fam.per_task[3].b);
    }
    let ra = pearson(&a0, &a1);
    let rb = pearson(&b0, &b1);
    assert!((0.55..0.75).contains(&ra), "corr(a) = {ra}, want ~0.652");
    assert!((0.90..0.96).contains(&rb), "corr(b) = {rb}, want ~0.930");
}

#[test]
fn independent_mode_decorrelates_tasks() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 6000;
    let mut a0 = Vec::with_capacity(n);
    let mut a1 = Vec::with_capacity(n);
    for _ in 0..n {
        let fam = sample_family_params(&mut rng, CorrelationMode::Independent, 0.1);
        a0.push(fam.per_task[0].a);
        a1.push(fam.per_task[1].a);
    }
    let r = pearson(&a0, &a1);
    assert!(r.abs() < 0.05, "corr(a) = {r}, want ~0");
}

// ---- context masking ----

fn grid_target(n: usize, n_tasks: usize) -> MultiTaskBatch<f64> {
    let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let ys = (0..n_tasks)
        .map(|t| x.iter().map(|&v| (t as f64 + 1.0) * v).collect())
        .collect();
    MultiTaskBatch::from_complete_target(x, ys, 1)
}

#[test]
fn observed_fraction_tracks_the_drop_rate() {
    // Each of m * T context labels survives with probability 1 - gamma.
    let target = grid_target(50, 4);
    let (m, gamma, draws) = (10usize, 0.3, 2000usize);
    let mut total = 0usize;
    for i in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(99, "mask", i as u64));
        let batch = sample_context_mask(&mut rng, &target, m, gamma).unwrap();
        total += batch.observed_context_count();
    }
    let fraction = total as f64 / (draws * m * 4) as f64;
    assert!(
        (fraction - 0.7).abs() < 0.01,
        "observed fraction {fraction}, want ~0.7"
    );
}

#[test]
fn zero_gamma_keeps_every_label() {
    let target = grid_target(30, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch = sample_context_mask(&mut rng, &target, 12, 0.0).unwrap();
    assert!(batch.is_complete());
    assert_eq!(batch.observed_context_count(), 12 * 4);
}

#[test]
fn aggressive_dropping_still_leaves_each_task_observed() {
    // gamma 0.95 with only three context rows starves tasks in most raw
    // draws, so this exercises both the resampling and the forcing path.
    let target = grid_target(20, 4);
    for i in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(7, "starve", i));
        let batch = sample_context_mask(&mut rng, &target, 3, 0.95).unwrap();
        for (t, mask) in batch.context_mask.iter().enumerate() {
            assert!(
                mask.iter().any(|&b| b),
                "draw {i}: task {t} lost every context label"
            );
        }
    }
}

#[test]
fn context_rows_are_gathered_from_the_target() {
    let target = grid_target(40, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch = sample_context_mask(&mut rng, &target, 8, 0.2).unwrap();
    assert_eq!(batch.n_context(), 8);
    let mut prev = None;
    for (j, &row) in batch.context_idx.iter().enumerate() {
        assert!(row < 40);
        assert!(prev.is_none_or(|p: usize| p < row), "rows must ascend");
        prev = Some(row);
        assert_eq!(batch.x_context[j], batch.x_target[row]);
        for t in 0..2 {
            if batch.context_mask[t][j] {
                assert_eq!(batch.y_context[t][j], batch.y_target[t][row]);
            }
        }
    }
}
