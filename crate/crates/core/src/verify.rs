//! Gradient verification suite: finite-difference oracles against the
//! backward pass, second derivatives, and the full meta-gradient. Shared by
//! the test suite and the `gradcheck` CLI command.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{inner_adapt, LossKind, Order};
use crate::fd::{finite_diff_grad, worst_rel_error};
use crate::graph::{Graph, NodeId};
use crate::models::{bind_params, forward_nodes, init_params, Activation, MlpSpec, ParamVector};
use crate::taskgen::{sample_sinusoid_episode, stream_rng, streams, Episode, SinusoidTask};
use crate::tensor::Tensor;

/// One named check with its worst observed relative error and tolerance.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub worst_rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_error <= self.tolerance
    }
}

fn nudge(v: f64) -> f64 {
    // keep relu inputs at least 1e-3 from the kink
    if v.abs() < 1e-3 {
        if v >= 0.0 {
            v + 1e-3
        } else {
            v - 1e-3
        }
    } else {
        v
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| nudge(rng.gen_range(-2.0..2.0))).collect();
    Tensor::new(shape, data)
}

/// Build a random scalar-valued graph of the given depth over the op set,
/// rooted at leaves bound from `theta` (all 2×2 matrices).
fn random_scalar_graph(g: &mut Graph, theta: &ParamVector, depth: usize, rng: &mut ChaCha8Rng) -> NodeId {
    let mut pool: Vec<NodeId> = theta.entries().iter().map(|(_, t)| g.leaf(t.clone())).collect();
    for _ in 0..depth {
        let pick = rng.gen_range(0..pool.len());
        let a = pool[pick];
        let node = match rng.gen_range(0..9) {
            0 => {
                let b = pool[rng.gen_range(0..pool.len())];
                g.add(a, b)
            }
            1 => {
                let b = pool[rng.gen_range(0..pool.len())];
                g.sub(a, b)
            }
            2 => {
                let b = pool[rng.gen_range(0..pool.len())];
                g.mul(a, b)
            }
            3 => g.scalar_mul(a, rng.gen_range(0.2..1.5)),
            4 => {
                let b = pool[rng.gen_range(0..pool.len())];
                g.matmul(a, b)
            }
            5 => g.relu(a),
            6 => g.tanh(a),
            7 => {
                // bounded exp: exp(0.5·tanh(x))
                let t = g.tanh(a);
                let s = g.scalar_mul(t, 0.5);
                g.exp(s)
            }
            _ => {
                // log over a softmax keeps the argument positive
                let s = g.softmax(a);
                g.log(s)
            }
        };
        pool.push(node);
    }
    // reduce everything to one scalar so every leaf is reachable
    let mut total: Option<NodeId> = None;
    for &n in &pool {
        let m = g.mean_all(n);
        let t = g.tanh(m); // keep magnitudes moderate for the fd oracle
        total = Some(match total {
            Some(acc) => g.add(acc, t),
            None => t,
        });
    }
    total.unwrap()
}

/// Backward vs central differences on random graphs of depth ≤ 6.
///
/// The structure rng is replayed with the same seed for every evaluation so
/// the finite-difference oracle sees the exact same graph at θ ± h·eᵢ.
pub fn check_random_graphs(seed: u64, n_graphs: usize) -> CheckReport {
    let mut rng = stream_rng(seed, streams::TASK);
    let mut worst = 0.0f64;
    for _ in 0..n_graphs {
        let theta = ParamVector::new(vec![
            ("a".into(), random_tensor(vec![2, 2], &mut rng)),
            ("b".into(), random_tensor(vec![2, 2], &mut rng)),
            ("c".into(), random_tensor(vec![2, 2], &mut rng)),
        ]);
        let depth = rng.gen_range(1..=6);
        let structure_seed: u64 = rng.gen();
        let eval = |p: &ParamVector| -> f64 {
            let mut sg = stream_rng(structure_seed, 0);
            let mut g = Graph::new();
            let out = random_scalar_graph(&mut g, p, depth, &mut sg);
            g.value(out).item()
        };
        let analytic = {
            let mut sg = stream_rng(structure_seed, 0);
            let mut g = Graph::new();
            let out = random_scalar_graph(&mut g, &theta, depth, &mut sg);
            // the builder binds its leaves first, so they are ids 0..len
            let roots: Vec<NodeId> = (0..theta.len()).map(NodeId).collect();
            let grads = g.backward(out, &roots).unwrap();
            let flat: Vec<f64> = grads
                .iter()
                .flat_map(|&id| g.value(id).data().to_vec())
                .collect();
            theta.unflatten_like(&flat)
        };
        let numeric = finite_diff_grad(eval, &theta, 1e-5).expect("finite objective");
        worst = worst.max(worst_rel_error(&analytic, &numeric));
    }
    CheckReport {
        name: "random-graph gradients vs finite differences".into(),
        worst_rel_error: worst,
        tolerance: 1e-5,
    }
}

/// Second derivative of univariate polynomials up to degree 4 by
/// backward-of-backward against the analytic value.
pub fn check_polynomial_second_derivative() -> CheckReport {
    // p(x) = Σ c_k x^k, p''(x) = Σ k(k−1) c_k x^{k−2}
    let coeffs = [0.7, -1.3, 0.5, 2.0, -0.25];
    let xs = [-1.5, -0.3, 0.4, 2.0];
    let mut worst = 0.0f64;
    for &x0 in &xs {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(x0));
        let mut powers = vec![g.scalar(1.0), x];
        for k in 2..=4 {
            let prev = powers[k - 1];
            powers.push(g.mul(prev, x));
        }
        let mut poly: Option<NodeId> = None;
        for (k, &c) in coeffs.iter().enumerate() {
            let term = g.scalar_mul(powers[k], c);
            poly = Some(match poly {
                Some(p) => g.add(p, term),
                None => term,
            });
        }
        let first = g.backward(poly.unwrap(), &[x]).unwrap()[0];
        let second = g.backward(first, &[x]).unwrap()[0];
        let got = g.value(second).item();
        let expect: f64 = coeffs
            .iter()
            .enumerate()
            .skip(2)
            .map(|(k, &c)| (k * (k - 1)) as f64 * c * x0.powi(k as i32 - 2))
            .sum();
        worst = worst.max((got - expect).abs() / expect.abs().max(1e-8));
    }
    CheckReport {
        name: "polynomial second derivatives (backward of backward)".into(),
        worst_rel_error: worst,
        tolerance: 1e-8,
    }
}

/// The full second-order meta-objective L(θ − α∇L(θ,D_tr), D_te) on a
/// [1,8,1] relu network vs central finite differences.
pub fn check_meta_gradient(seed: u64) -> CheckReport {
    let err = meta_gradient_error(seed, Order::Second);
    CheckReport {
        name: "second-order meta-gradient vs finite differences ([1,8,1])".into(),
        worst_rel_error: err,
        tolerance: 1e-4,
    }
}

/// A deliberately first-order meta-gradient must fail the same check on a
/// curved probe; returns the (should-be-large) error.
pub fn check_first_order_is_detected(seed: u64) -> CheckReport {
    let err = meta_gradient_error(seed, Order::First);
    CheckReport {
        name: "first-order gradient rejected by curved probe".into(),
        // "error" here is how far the first-order gradient must deviate
        worst_rel_error: if err > 1e-3 { 0.0 } else { 1.0 },
        tolerance: 0.5,
    }
}

pub fn meta_gradient_error(seed: u64, order: Order) -> f64 {
    let spec = MlpSpec::new(vec![1, 8, 1], Activation::Relu);
    let theta = init_params(&spec, seed);
    let mut rng = stream_rng(seed, streams::TASK);
    let task = SinusoidTask {
        amplitude: 2.3,
        phase: 0.7,
    };
    let ep = sample_sinusoid_episode(&task, 10, 10, &mut rng);
    let alpha = 0.05;

    let analytic = meta_gradient(&spec, &theta, &ep, alpha, order);
    let objective = |p: &ParamVector| meta_objective_value(&spec, p, &ep, alpha);
    let numeric = finite_diff_grad(objective, &theta, 1e-5).expect("finite objective");
    worst_rel_error(&analytic, &numeric)
}

/// Value of L(θ − α∇L(θ,D_tr), D_te).
pub fn meta_objective_value(spec: &MlpSpec, theta: &ParamVector, ep: &Episode, alpha: f64) -> f64 {
    let mut g = Graph::new();
    let nodes = bind_params(&mut g, theta).ids();
    let (adapted, _) = inner_adapt(
        &mut g,
        spec,
        &nodes,
        ep,
        alpha,
        1,
        Order::Second,
        LossKind::Mse,
    )
    .expect("finite adaptation");
    let xn = g.leaf(ep.query_x.clone());
    let out = forward_nodes(&mut g, spec, &adapted, xn);
    let yn = g.leaf(ep.query_y.clone());
    let l = g.mse(out, yn);
    g.value(l).item()
}

/// Meta-gradient of the same objective by the engine's backward pass.
pub fn meta_gradient(
    spec: &MlpSpec,
    theta: &ParamVector,
    ep: &Episode,
    alpha: f64,
    order: Order,
) -> ParamVector {
    let mut g = Graph::new();
    let nodes = bind_params(&mut g, theta).ids();
    let (adapted, _) =
        inner_adapt(&mut g, spec, &nodes, ep, alpha, 1, order, LossKind::Mse).expect("finite");
    let xn = g.leaf(ep.query_x.clone());
    let out = forward_nodes(&mut g, spec, &adapted, xn);
    let yn = g.leaf(ep.query_y.clone());
    let l = g.mse(out, yn);
    let grads = g.backward(l, &nodes).unwrap();
    let flat: Vec<f64> = grads
        .iter()
        .flat_map(|&id| g.value(id).data().to_vec())
        .collect();
    theta.unflatten_like(&flat)
}

/// MLP forward/backward against finite differences on small random specs.
pub fn check_mlp_gradients(seed: u64) -> CheckReport {
    let mut worst = 0.0f64;
    for (i, layers) in [vec![2, 4, 1], vec![3, 5, 3], vec![1, 8, 1]].iter().enumerate() {
        for &act in &[Activation::Relu, Activation::Tanh] {
            let spec = MlpSpec::new(layers.clone(), act);
            let theta = init_params(&spec, seed + i as u64);
            let mut rng = stream_rng(seed + 100 + i as u64, streams::NOISE);
            let x = random_tensor(vec![4, spec.input_dim()], &mut rng);
            let y = random_tensor(vec![4, spec.output_dim()], &mut rng);
            let eval = |p: &ParamVector| -> f64 {
                let mut g = Graph::new();
                let ids = bind_params(&mut g, p).ids();
                let xn = g.leaf(x.clone());
                let out = forward_nodes(&mut g, &spec, &ids, xn);
                let yn = g.leaf(y.clone());
                let l = g.mse(out, yn);
                g.value(l).item()
            };
            let analytic = {
                let mut g = Graph::new();
                let ids = bind_params(&mut g, &theta).ids();
                let xn = g.leaf(x.clone());
                let out = forward_nodes(&mut g, &spec, &ids, xn);
                let yn = g.leaf(y.clone());
                let l = g.mse(out, yn);
                let grads = g.backward(l, &ids).unwrap();
                let flat: Vec<f64> = grads
                    .iter()
                    .flat_map(|&id| g.value(id).data().to_vec())
                    .collect();
                theta.unflatten_like(&flat)
            };
            let numeric = finite_diff_grad(eval, &theta, 1e-5).expect("finite");
            worst = worst.max(worst_rel_error(&analytic, &numeric));
        }
    }
    CheckReport {
        name: "MLP parameter gradients vs finite differences".into(),
        worst_rel_error: worst,
        tolerance: 1e-5,
    }
}

/// Full suite used by the `gradcheck` command.
pub fn run_all(seed: u64) -> Vec<CheckReport> {
    vec![
        check_random_graphs(seed, 40),
        check_polynomial_second_derivative(),
        check_mlp_gradients(seed),
        check_meta_gradient(seed),
        check_first_order_is_detected(seed),
    ]
}
