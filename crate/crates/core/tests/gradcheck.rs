//! Finite-difference verification of the analytic backward pass.
//!
//! Three layers of coverage: every graph op against central differences on
//! random inputs, the composite network blocks (MLP, attention stacks, PMA
//! pooling) through their registered parameters, and the full training loss
//! of every model variant on a micro model, perturbing stored parameters
//! directly.

use mtnp_core::autodiff::{
    attention_stack, check_gradients, cross_attention_stack, mlp_forward, pool,
    register_attention_stack, register_cross_attention_stack, register_mlp, register_pool,
    AttnStackSpec, MlpSpec, ParamSet, PoolMode,
};
use mtnp_core::datasets::{sample_context_mask, MultiTaskBatch};
use mtnp_core::models::{
    EncoderPaths, LatentStructure, ModelDims, OutputKind, PoolKind, StackedBatch,
    TaskEmbeddingKind,
};
use mtnp_core::objective::{build_elbo, LatentDraws};
use mtnp_core::{Graph, Model, ModelVariant, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-9;
const EPS: f64 = 1e-5;

/// Values bounded away from zero so relu kinks stay clear of the
/// finite-difference step.
fn gen_data(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, values).unwrap()
}

fn positive_data(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(0.4..1.6)).collect();
    Tensor::new(shape, values).unwrap()
}

/// Reduces a tensor to a scalar through distinct, sign-alternating weights,
/// so a backward pass that permutes or drops elements cannot cancel out.
fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| (0.2 + 0.13 * i as f64) * if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect();
    let wl = g.leaf(Tensor::new(shape, w).unwrap());
    let prod = g.mul(v, wl);
    g.sum_all(prod)
}

fn assert_grads(build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var, inputs: &[Tensor<f64>]) {
    let report = check_gradients(build, inputs, EPS, REL_TOL, ABS_TOL);
    assert!(
        report.pass,
        "max ratio {:.3}, worst: {}",
        report.max_ratio, report.worst
    );
}

#[test]
fn add_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.add(v[0], v[1]);
        weighted_sum(g, s)
    };
    let a = gen_data(&mut rng, vec![2, 3]);
    let b = gen_data(&mut rng, vec![2, 3]);
    assert_grads(&build, &[a, b]);
}

#[test]
fn mul_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.mul(v[0], v[1]);
        weighted_sum(g, s)
    };
    let a = gen_data(&mut rng, vec![2, 3]);
    let b = gen_data(&mut rng, vec![2, 3]);
    assert_grads(&build, &[a, b]);
}

#[test]
fn scale_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.scale(v[0], -1.7);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![3, 2])]);
}

#[test]
fn add_scalar_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.add_scalar(v[0], 0.31);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![3, 2])]);
}

#[test]
fn matmul_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.matmul(v[0], v[1]);
        weighted_sum(g, s)
    };
    let x = gen_data(&mut rng, vec![2, 3, 4]);
    let w = gen_data(&mut rng, vec![4, 5]);
    assert_grads(&build, &[x, w]);
}

#[test]
fn bmm_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.bmm(v[0], v[1], false);
        weighted_sum(g, s)
    };
    let a = gen_data(&mut rng, vec![2, 3, 4]);
    let b = gen_data(&mut rng, vec![2, 4, 2]);
    assert_grads(&build, &[a, b]);
}

#[test]
fn bmm_transposed_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.bmm(v[0], v[1], true);
        weighted_sum(g, s)
    };
    let a = gen_data(&mut rng, vec![2, 3, 4]);
    let b = gen_data(&mut rng, vec![2, 5, 4]);
    assert_grads(&build, &[a, b]);
}

#[test]
fn add_bias_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.add_bias(v[0], v[1]);
        weighted_sum(g, s)
    };
    let x = gen_data(&mut rng, vec![2, 2, 3]);
    let b = gen_data(&mut rng, vec![3]);
    assert_grads(&build, &[x, b]);
}

#[test]
fn add_batch_vec_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.add_batch_vec(v[0], v[1]);
        weighted_sum(g, s)
    };
    let x = gen_data(&mut rng, vec![2, 3, 4]);
    let e = gen_data(&mut rng, vec![2, 4]);
    assert_grads(&build, &[x, e]);
}

#[test]
fn relu_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.relu(v[0]);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![3, 4])]);
}

#[test]
fn softplus_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.softplus(v[0]);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![3, 4])]);
}

#[test]
fn square_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.square(v[0]);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![3, 4])]);
}

#[test]
fn softmax_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.softmax_masked(v[0], None);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![3, 4])]);
}

#[test]
fn softmax_masked_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mask = vec![true, true, false, true, false, true, true, true];
    let build = move |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.softmax_masked(v[0], Some(&mask));
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![2, 3, 4])]);
}

#[test]
fn layer_norm_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.layer_norm(v[0], v[1], v[2]);
        weighted_sum(g, s)
    };
    let x = gen_data(&mut rng, vec![2, 3, 4]);
    let gain = gen_data(&mut rng, vec![4]);
    let bias = gen_data(&mut rng, vec![4]);
    assert_grads(&build, &[x, gain, bias]);
}

#[test]
fn mean_dim1_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.mean_dim1(v[0], None);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![2, 3, 4])]);
}

#[test]
fn mean_dim1_masked_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mask = vec![true, false, true, false, true, true];
    let build = move |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.mean_dim1(v[0], Some(&mask));
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![2, 3, 4])]);
}

#[test]
fn concat_last_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.concat_last(&[v[0], v[1], v[2]]);
        weighted_sum(g, s)
    };
    let a = gen_data(&mut rng, vec![2, 2]);
    let b = gen_data(&mut rng, vec![2, 3]);
    let c = gen_data(&mut rng, vec![2, 1]);
    assert_grads(&build, &[a, b, c]);
}

#[test]
fn slice_last_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.slice_last(v[0], 1, 3);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![2, 3, 5])]);
}

#[test]
fn tile_dim0_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.tile_dim0(v[0], 3);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![1, 2, 3])]);
}

#[test]
fn tile_dim1_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.tile_dim1(v[0], 4);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![2, 1, 3])]);
}

#[test]
fn split_heads_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.split_heads(v[0], 2);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![2, 3, 4])]);
}

#[test]
fn merge_heads_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.merge_heads(v[0], 2);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![4, 3, 2])]);
}

#[test]
fn swap_dims01_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.swap_dims01(v[0]);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![2, 3, 4])]);
}

#[test]
fn permute_0213_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.permute_0213(v[0]);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![2, 3, 2, 2])]);
}

#[test]
fn repeat_interleave0_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.repeat_interleave0(v[0], 3);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![2, 3, 2])]);
}

#[test]
fn reshape_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.reshape(v[0], vec![3, 2, 2]);
        weighted_sum(g, s)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![2, 6])]);
}

#[test]
fn sum_all_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let sq = g.square(v[0]);
        g.sum_all(sq)
    };
    assert_grads(&build, &[gen_data(&mut rng, vec![3, 4])]);
}

#[test]
fn masked_sum_all_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let no_mask = |g: &mut Graph<f64>, v: &[Var]| {
        let sq = g.square(v[0]);
        g.masked_sum_all(sq, None)
    };
    assert_grads(&no_mask, &[gen_data(&mut rng, vec![4, 3])]);

    let mask = vec![true, false, true, true];
    let masked = move |g: &mut Graph<f64>, v: &[Var]| {
        let sq = g.square(v[0]);
        g.masked_sum_all(sq, Some(&mask))
    };
    assert_grads(&masked, &[gen_data(&mut rng, vec![4, 3])]);
}

#[test]
fn gaussian_nll_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let y = gen_data(&mut rng, vec![2, 3]);
    let build = move |g: &mut Graph<f64>, v: &[Var]| {
        let nll = g.gaussian_nll_diag(v[0], v[1], &y);
        weighted_sum(g, nll)
    };
    let mean = gen_data(&mut rng, vec![2, 3]);
    let var = positive_data(&mut rng, vec![2, 3]);
    assert_grads(&build, &[mean, var]);
}

#[test]
fn gaussian_kl_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let build = |g: &mut Graph<f64>, v: &[Var]| {
        let kl = g.gaussian_kl_diag(v[0], v[1], v[2], v[3]);
        weighted_sum(g, kl)
    };
    let mq = gen_data(&mut rng, vec![2, 3]);
    let vq = positive_data(&mut rng, vec![2, 3]);
    let mp = gen_data(&mut rng, vec![2, 3]);
    let vp = positive_data(&mut rng, vec![2, 3]);
    assert_grads(&build, &[mq, vq, mp, vp]);
}

#[test]
fn reparam_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let noise: Vec<f64> = (0..6).map(|i| 0.7 - 0.3 * i as f64).collect();
    let build = move |g: &mut Graph<f64>, v: &[Var]| {
        let s = g.reparam_sample(v[0], v[1], &noise);
        weighted_sum(g, s)
    };
    let mean = gen_data(&mut rng, vec![2, 3]);
    let var = positive_data(&mut rng, vec![2, 3]);
    assert_grads(&build, &[mean, var]);
}

#[test]
fn categorical_nll_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let raw = positive_data(&mut rng, vec![4, 3]);
    let mut probs = raw.values.clone();
    for row in probs.chunks_mut(3) {
        let s: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= s;
        }
    }
    let classes = [0usize, 2, 1, 0];
    let build = move |g: &mut Graph<f64>, v: &[Var]| {
        let nll = g.categorical_nll(v[0], &classes);
        weighted_sum(g, nll)
    };
    assert_grads(&build, &[Tensor::new(vec![4, 3], probs).unwrap()]);
}

// ---- composite blocks through their registered parameters ----

/// Runs `check_gradients` over every registered parameter of `ps` plus one
/// extra data tensor appended as the final input.
fn check_module(
    ps: &ParamSet<f64>,
    data: Vec<Tensor<f64>>,
    forward: &dyn Fn(&mut Graph<f64>, &mtnp_core::autodiff::BoundParams<f64>, &[Var]) -> Var,
) {
    let n_params = ps.len();
    let build = |g: &mut Graph<f64>, vars: &[Var]| {
        let bp = ps.bind_vars(vars[..n_params].to_vec());
        forward(g, &bp, &vars[n_params..])
    };
    let mut inputs: Vec<Tensor<f64>> = ps.tensors().to_vec();
    inputs.extend(data);
    assert_grads(&build, &inputs);
}

#[test]
fn mlp_composite_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let spec = MlpSpec::new(3, 6, 2, 2);
    let mut ps = ParamSet::new();
    register_mlp(&mut ps, &mut rng, "mlp", spec);
    let x = gen_data(&mut rng, vec![4, 3]);
    check_module(&ps, vec![x], &|g, bp, data| {
        let out = mlp_forward(g, bp, "mlp", spec, data[0]);
        weighted_sum(g, out)
    });
}

#[test]
fn self_attention_composite_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let spec = AttnStackSpec::new(4, 2, 1);
    let mut ps = ParamSet::new();
    register_attention_stack(&mut ps, &mut rng, "enc", spec);
    let x = gen_data(&mut rng, vec![1, 3, 4]);
    let mask = vec![true, true, false];
    check_module(&ps, vec![x], &move |g, bp, data| {
        let out = attention_stack(g, bp, "enc", spec, data[0], Some(&mask));
        weighted_sum(g, out)
    });
}

#[test]
fn cross_attention_composite_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let spec = AttnStackSpec::new(4, 2, 1);
    let mut ps = ParamSet::new();
    register_cross_attention_stack(&mut ps, &mut rng, "dec", spec);
    let q = gen_data(&mut rng, vec![1, 2, 4]);
    let kv = gen_data(&mut rng, vec![1, 3, 4]);
    let mask = vec![true, false, true];
    check_module(&ps, vec![q, kv], &move |g, bp, data| {
        let out = cross_attention_stack(g, bp, "dec", spec, data[0], data[1], data[1], Some(&mask));
        weighted_sum(g, out)
    });
}

#[test]
fn pma_pool_composite_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut ps = ParamSet::new();
    register_pool(&mut ps, &mut rng, "pool", PoolMode::Pma, 4, 2);
    let x = gen_data(&mut rng, vec![2, 3, 4]);
    let mask = vec![true, true, false, true, true, true];
    check_module(&ps, vec![x], &move |g, bp, data| {
        let out = pool(g, bp, "pool", PoolMode::Pma, 4, 2, data[0], Some(&mask));
        weighted_sum(g, out)
    });
}

// ---- full training losses on a micro model ----

const ELBO_REL_TOL: f64 = 1e-3;
const ELBO_ABS_TOL: f64 = 1e-8;

/// One family of 3 target points over 2 tasks, with 2 context points.
fn micro_batches(gamma: f64, seed: u64, categorical: bool) -> Vec<MultiTaskBatch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = vec![-0.8, 0.1, 0.9];
    let y0: Vec<f64> = x.iter().map(|&v: &f64| (1.3 * v).sin()).collect();
    let y1: Vec<f64> = if categorical {
        vec![0.0, 1.0, 2.0]
    } else {
        x.iter().map(|&v: &f64| (0.7 * v).tanh()).collect()
    };
    let target = MultiTaskBatch::from_complete_target(x, vec![y0, y1], 1);
    vec![sample_context_mask(&mut rng, &target, 2, gamma).unwrap()]
}

fn micro_model(variant: ModelVariant, kinds: Vec<OutputKind>, seed: u64) -> Model<f64> {
    let mut model = Model::build(variant, ModelDims::new(1, 2, 8, 2), kinds, seed).unwrap();
    jitter_params(&mut model, seed ^ 0xA5A5);
    model
}

/// Moves every trainable parameter to a generic point. Biases initialize to
/// exactly zero, and an input row whose previous layer dies completely under
/// relu parks the next preactivation exactly on the kink, where the analytic
/// subgradient and central differences legitimately disagree.
fn jitter_params(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.tensors_mut() {
        if !t.requires_grad {
            continue;
        }
        for v in &mut t.values {
            let d = rng.gen_range(0.005..0.02);
            *v += if rng.gen_bool(0.5) { d } else { -d };
        }
    }
}

fn elbo_scalar(
    model: &Model<f64>,
    sb: &StackedBatch<f64>,
    draws: &LatentDraws<f64>,
    beta: f64,
) -> f64 {
    let mut g = Graph::new();
    let bp = model.params.bind(&mut g, true);
    let terms = build_elbo(model, &mut g, &bp, sb, draws, beta).unwrap();
    g.value(terms.loss).values[0]
}

/// Central-difference check of the loss against analytic parameter
/// gradients. Each trainable tensor is probed at its first, middle, and
/// last element; a failing element is retried with a smaller step to rule
/// out relu-kink crossings before it counts as a failure.
fn check_variant_elbo(variant: ModelVariant, kinds: Vec<OutputKind>, gamma: f64) {
    let mut model = micro_model(variant, kinds, 97);
    let batches = micro_batches(gamma, 55, false);
    let sb = StackedBatch::stack(&batches).unwrap();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(77);
    let draws = LatentDraws::for_model(&model, sb.b, &mut noise_rng);
    let beta = 0.8;
    check_elbo_gradients(&mut model, &sb, &draws, beta);
}

fn check_elbo_gradients(
    model: &mut Model<f64>,
    sb: &StackedBatch<f64>,
    draws: &LatentDraws<f64>,
    beta: f64,
) {
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::new();
        let bp = model.params.bind(&mut g, true);
        let terms = build_elbo(model, &mut g, &bp, sb, draws, beta).unwrap();
        let grads = g.backward(terms.loss);
        bp.vars()
            .iter()
            .map(|&v| grads.get(v).map(<[f64]>::to_vec))
            .collect()
    };

    let names = model.params.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        if !model.params.tensors()[i].requires_grad {
            assert!(
                analytic[i].is_none(),
                "frozen parameter `{name}` received a gradient"
            );
            continue;
        }
        let grad = analytic[i]
            .as_ref()
            .unwrap_or_else(|| panic!("no gradient for `{name}`"));
        let numel = model.params.tensors()[i].numel();
        let picks: Vec<usize> = if numel <= 3 {
            (0..numel).collect()
        } else {
            vec![0, numel / 2, numel - 1]
        };
        for j in picks {
            let x = model.params.tensors()[i].values[j];
            let a = grad[j];
            let mut ok = false;
            let mut last = (0.0, 0.0);
            for eps in [1e-5, 1e-6] {
                let h = eps * x.abs().max(1.0);
                model.params.tensors_mut()[i].values[j] = x + h;
                let fp = elbo_scalar(model, sb, draws, beta);
                model.params.tensors_mut()[i].values[j] = x - h;
                let fm = elbo_scalar(model, sb, draws, beta);
                model.params.tensors_mut()[i].values[j] = x;
                let fd = (fp - fm) / (2.0 * h);
                let denom = ELBO_ABS_TOL + ELBO_REL_TOL * a.abs().max(fd.abs());
                last = (fd, (a - fd).abs() / denom);
                if (a - fd).abs() <= denom {
                    ok = true;
                    break;
                }
            }
            assert!(
                ok,
                "`{name}`[{j}]: analytic {a:.6e}, fd {:.6e}, ratio {:.2}",
                last.0, last.1
            );
        }
    }
}

#[test]
fn elbo_gradients_mtnp() {
    check_variant_elbo(
        ModelVariant::mtnp(),
        vec![OutputKind::Continuous; 2],
        0.5,
    );
}

#[test]
fn elbo_gradients_stnp() {
    check_variant_elbo(
        ModelVariant::stnp(),
        vec![OutputKind::Continuous; 2],
        0.5,
    );
}

#[test]
fn elbo_gradients_jtnp() {
    check_variant_elbo(
        ModelVariant::jtnp(),
        vec![OutputKind::Continuous; 2],
        0.0,
    );
}

#[test]
fn elbo_gradients_mtnp_global_only() {
    check_variant_elbo(
        ModelVariant::mtnp().with_latent_structure(LatentStructure::GlobalOnly),
        vec![OutputKind::Continuous; 2],
        0.5,
    );
}

#[test]
fn elbo_gradients_mtnp_task_only() {
    check_variant_elbo(
        ModelVariant::mtnp().with_latent_structure(LatentStructure::TaskOnly),
        vec![OutputKind::Continuous; 2],
        0.5,
    );
}

#[test]
fn elbo_gradients_deterministic_only() {
    check_variant_elbo(
        ModelVariant {
            encoder_paths: EncoderPaths::DeterministicOnly,
            ..ModelVariant::mtnp()
        },
        vec![OutputKind::Continuous; 2],
        0.5,
    );
}

#[test]
fn elbo_gradients_latent_only() {
    check_variant_elbo(
        ModelVariant {
            encoder_paths: EncoderPaths::LatentOnly,
            ..ModelVariant::mtnp()
        },
        vec![OutputKind::Continuous; 2],
        0.5,
    );
}

#[test]
fn elbo_gradients_mean_pooling() {
    check_variant_elbo(
        ModelVariant {
            pooling: PoolKind::Mean,
            ..ModelVariant::mtnp()
        },
        vec![OutputKind::Continuous; 2],
        0.5,
    );
}

#[test]
fn elbo_gradients_without_pre_pool_attention() {
    check_variant_elbo(
        ModelVariant {
            pre_pool_self_attention: false,
            ..ModelVariant::mtnp()
        },
        vec![OutputKind::Continuous; 2],
        0.5,
    );
}

#[test]
fn elbo_gradients_onehot_task_embedding() {
    check_variant_elbo(
        ModelVariant {
            task_embedding: TaskEmbeddingKind::Onehot,
            ..ModelVariant::mtnp()
        },
        vec![OutputKind::Continuous; 2],
        0.5,
    );
}

#[test]
fn elbo_gradients_with_categorical_task() {
    let variant = ModelVariant::stnp();
    let kinds = vec![OutputKind::Continuous, OutputKind::Categorical(3)];
    let mut model = micro_model(variant, kinds, 101);
    let batches = micro_batches(0.5, 59, true);
    let sb = StackedBatch::stack(&batches).unwrap();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(83);
    let draws = LatentDraws::for_model(&model, sb.b, &mut noise_rng);
    check_elbo_gradients(&mut model, &sb, &draws, 0.8);
}
