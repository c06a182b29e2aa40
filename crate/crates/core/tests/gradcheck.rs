//! Finite-difference gradient checks for every differentiable op.
//!
//! Each op's analytic adjoint is compared against central differences
//! (h = 1e-3) at f64 over at least 10 random seeds. The relative error
//! tolerance is 1e-4.

use mravff_core::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

/// Builds a scalar loss from a set of input tensors.
type LossFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

// Relative error with a unit floor: strict ratio for O(1) gradients,
// absolute comparison where the gradient itself is near zero (there the
// h^2 truncation term of the central difference dominates any ratio).
fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() / denom
}

/// Checks d(loss)/d(input_i) for every input against central differences.
fn gradcheck(name: &str, inputs: &[Tensor<f64>], f: &LossFn) {
    // analytic
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone()).unwrap()).collect();
    let loss = f(&mut g, &vars);
    assert_eq!(g.value(loss).numel(), 1, "{name}: loss must be scalar");
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    // numeric
    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone()).unwrap()).collect();
        let loss = f(&mut g, &vars);
        g.data(loss)[0]
    };
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut dp = t.data().to_vec();
            dp[j] += H;
            plus[ti] = Tensor::new(t.shape().to_vec(), dp).unwrap();
            let mut dm = t.data().to_vec();
            dm[j] -= H;
            minus[ti] = Tensor::new(t.shape().to_vec(), dm).unwrap();
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let an = analytic[ti][j];
            assert!(
                rel_err(an, fd) < TOL,
                "{name}: input {ti} element {j}: analytic {an} vs fd {fd}"
            );
        }
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.2..2.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted sum so the probe loss mixes all output elements unevenly.
fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let n = g.value(v).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let shape = g.shape(v).to_vec();
    let wv = g.input(Tensor::new(shape, w).unwrap()).unwrap();
    let prod = g.mul(v, wv).unwrap();
    g.sum_all(prod).unwrap()
}

#[test]
fn add_sub_mul_div_grads() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[3, 4], &mut rng);
        let b_pos = positive_tensor(&[3, 4], &mut rng);
        gradcheck("add", &[a.clone(), b.clone()], &move |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("sub", &[a.clone(), b.clone()], &move |g, v| {
            let s = g.sub(v[0], v[1]).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("multiply", &[a.clone(), b.clone()], &move |g, v| {
            let s = g.mul(v[0], v[1]).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("divide", &[a.clone(), b_pos.clone()], &move |g, v| {
            let s = g.div(v[0], v[1]).unwrap();
            weighted_sum(g, s, seed)
        });
    }
}

#[test]
fn broadcast_grads() {
    // [C,T] against [T]: leading-dim broadcast used by the gating path.
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&[3, 5], &mut rng);
        let b = rand_tensor(&[5], &mut rng);
        gradcheck("mul_broadcast", &[a.clone(), b.clone()], &move |g, v| {
            let s = g.mul(v[0], v[1]).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("add_broadcast", &[a.clone(), b.clone()], &move |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            weighted_sum(g, s, seed)
        });
    }
}

#[test]
fn min_max_elem_grads() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let a = rand_tensor(&[4, 4], &mut rng);
        let b = rand_tensor(&[4, 4], &mut rng);
        gradcheck("min_elem", &[a.clone(), b.clone()], &move |g, v| {
            let s = g.min_elem(v[0], v[1]).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("max_elem", &[a, b], &move |g, v| {
            let s = g.max_elem(v[0], v[1]).unwrap();
            weighted_sum(g, s, seed)
        });
    }
}

#[test]
fn scalar_op_grads() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let a = rand_tensor(&[2, 6], &mut rng);
        let p = positive_tensor(&[2, 6], &mut rng);
        gradcheck("scale", &[a.clone()], &move |g, v| {
            let s = g.scale(v[0], -1.7).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("add_scalar", &[a.clone()], &move |g, v| {
            let s = g.add_scalar(v[0], 0.3).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("pow_scalar", &[p], &move |g, v| {
            let s = g.pow_scalar(v[0], 2.0).unwrap();
            weighted_sum(g, s, seed)
        });
    }
}

#[test]
fn activation_grads() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        // keep relu inputs away from the kink at zero
        let a = Tensor::new(
            vec![3, 4],
            (0..12)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.05..1.5);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
        .unwrap();
        gradcheck("relu", &[a.clone()], &move |g, v| {
            let s = g.relu(v[0]).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("sigmoid", &[a.clone()], &move |g, v| {
            let s = g.sigmoid(v[0]).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("softplus", &[a], &move |g, v| {
            let s = g.softplus(v[0]).unwrap();
            weighted_sum(g, s, seed)
        });
    }
}

#[test]
fn matmul_grads() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let a = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[4, 2], &mut rng);
        // plain sum: the spec case grad of sum(A*B)
        gradcheck("matmul_sum", &[a.clone(), b.clone()], &|g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum_all(c).unwrap()
        });
        gradcheck("matmul", &[a, b], &move |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, c, seed)
        });
        // batched against shared rhs
        let ab = rand_tensor(&[2, 3, 4], &mut rng);
        let bs = rand_tensor(&[4, 2], &mut rng);
        gradcheck("matmul_batched", &[ab, bs], &move |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, c, seed)
        });
    }
}

#[test]
fn transpose_reshape_slice_concat_grads() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let a = rand_tensor(&[3, 5], &mut rng);
        let b = rand_tensor(&[2, 5], &mut rng);
        gradcheck("transpose_last2", &[a.clone()], &move |g, v| {
            let t = g.transpose_last2(v[0]).unwrap();
            weighted_sum(g, t, seed)
        });
        gradcheck("reshape", &[a.clone()], &move |g, v| {
            let t = g.reshape(v[0], vec![5, 3]).unwrap();
            weighted_sum(g, t, seed)
        });
        gradcheck("slice_dim0", &[a.clone()], &move |g, v| {
            let t = g.slice(v[0], 0, 1, 2).unwrap();
            weighted_sum(g, t, seed)
        });
        gradcheck("slice_dim1", &[a.clone()], &move |g, v| {
            let t = g.slice(v[0], 1, 2, 3).unwrap();
            weighted_sum(g, t, seed)
        });
        gradcheck("concat", &[a, b], &move |g, v| {
            let t = g.concat0(&[v[0], v[1]]).unwrap();
            weighted_sum(g, t, seed)
        });
    }
}

#[test]
fn softmax_layernorm_grads() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let a = rand_tensor(&[3, 6], &mut rng);
        let gamma = positive_tensor(&[6], &mut rng);
        let beta = rand_tensor(&[6], &mut rng);
        gradcheck("softmax_lastdim", &[a.clone()], &move |g, v| {
            let s = g.softmax_lastdim(v[0]).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("softmax_masked", &[a.clone()], &move |g, v| {
            let s = g.softmax_lastdim_masked(v[0], 4).unwrap();
            weighted_sum(g, s, seed)
        });
        gradcheck("layer_norm", &[a, gamma, beta], &move |g, v| {
            let s = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(g, s, seed)
        });
    }
}

#[test]
fn conv_pool_resample_grads() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let x = rand_tensor(&[3, 8], &mut rng);
        let w = rand_tensor(&[2, 3, 3], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        gradcheck("conv1d", &[x.clone(), w.clone(), b.clone()], &move |g, v| {
            let c = g.conv1d(v[0], v[1], v[2], 1, 1).unwrap();
            weighted_sum(g, c, seed)
        });
        gradcheck("conv1d_strided", &[x.clone(), w, b], &move |g, v| {
            let c = g.conv1d(v[0], v[1], v[2], 2, 1).unwrap();
            weighted_sum(g, c, seed)
        });
        gradcheck("maxpool1d", &[x.clone()], &move |g, v| {
            let p = g.maxpool1d(v[0], 3, 2, 1).unwrap();
            weighted_sum(g, p, seed)
        });
        gradcheck("resample_time_down", &[x.clone()], &move |g, v| {
            let r = g.resample_time(v[0], 5).unwrap();
            weighted_sum(g, r, seed)
        });
        gradcheck("resample_time_up", &[x], &move |g, v| {
            let r = g.resample_time(v[0], 13).unwrap();
            weighted_sum(g, r, seed)
        });
    }
}

#[test]
fn reduction_grads() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let a = rand_tensor(&[4, 3], &mut rng);
        gradcheck("sum", &[a.clone()], &|g, v| g.sum_all(v[0]).unwrap());
        gradcheck("mean", &[a], &|g, v| {
            let m = g.mean_all(v[0]).unwrap();
            g.scale(m, 3.0).unwrap()
        });
    }
}

#[test]
fn fanout_matches_finite_differences() {
    // One tensor feeding two consumers: adjoints must sum.
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let a = rand_tensor(&[3, 3], &mut rng);
        gradcheck("fanout", &[a], &|g, v| {
            let s = g.sigmoid(v[0]).unwrap();
            let t = g.softplus(v[0]).unwrap();
            let u = g.mul(s, t).unwrap();
            let direct = g.sum_all(v[0]).unwrap();
            let mixed = g.sum_all(u).unwrap();
            g.add(direct, mixed).unwrap()
        });
    }
}

#[test]
fn composed_chain_matches_finite_differences() {
    // A deeper composition: conv -> layernorm(channelwise) -> attention-like
    // softmax product -> pooled reduction.
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = rand_tensor(&[2, 6], &mut rng);
        let w = rand_tensor(&[2, 2, 3], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        let gamma = positive_tensor(&[2], &mut rng);
        let beta = rand_tensor(&[2], &mut rng);
        gradcheck("composed", &[x, w, b, gamma, beta], &move |g, v| {
            let c = g.conv1d(v[0], v[1], v[2], 1, 1).unwrap();
            let ct = g.transpose_last2(c).unwrap();
            let n = g.layer_norm(ct, v[3], v[4], 1e-5).unwrap();
            let scores = g.matmul(n, v[0]).unwrap(); // [6,2]@[2,6] -> [6,6]
            let att = g.softmax_lastdim(scores).unwrap();
            let out = g.matmul(att, n).unwrap();
            weighted_sum(g, out, seed)
        });
    }
}
