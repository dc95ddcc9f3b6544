//! Property tests over the autodiff engine, the loss-weight generator, and
//! the meta-gradient machinery.

use metalearn::engine::{meta_step, LossKind, MetaConfig, Mode, Order};
use metalearn::fd::worst_rel_error;
use metalearn::models::{init_params, Activation, MlpSpec};
use metalearn::opt::{Adam, AdamConfig};
use metalearn::taskgen::{sample_sinusoid_episode, stream_rng, streams, SinusoidTask};
use metalearn::verify;
use metalearn::weightgen::{compute_weights, WeightConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_graph_gradients_match_finite_differences(seed in 0u64..10_000) {
        let report = verify::check_random_graphs(seed, 4);
        prop_assert!(report.passed(), "worst rel error {}", report.worst_rel_error);
    }

    #[test]
    fn weights_form_a_simplex(
        losses in proptest::collection::vec(0.0f64..20.0, 1..12),
        support in proptest::collection::vec(0.0f64..20.0, 1..12),
        threshold in 0.1f64..10.0,
    ) {
        let n = losses.len().min(support.len());
        let cfg = WeightConfig { threshold, floor: 1e-12, allow_signed: false };
        let w = compute_weights(&support[..n], &losses[..n], &cfg).unwrap();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_is_linear_in_the_seeded_output(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        // d(a*f)/dx == a * df/dx for a fixed graph.
        use metalearn::graph::Graph;
        use metalearn::tensor::Tensor;
        let grad_of_scaled = |scale: f64| -> f64 {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::scalar(b));
            let y = g.mul(x, x);
            let z = g.scalar_mul(y, scale);
            let grads = g.backward(z, &[x]).unwrap();
            g.value(grads[0]).item()
        };
        let base = grad_of_scaled(1.0);
        prop_assert!((grad_of_scaled(a) - a * base).abs() <= 1e-9 * (1.0 + base.abs() * a.abs()));
    }
}

#[test]
fn meta_gradient_matches_oracle_at_1e4() {
    for seed in [0, 1, 2] {
        let err = verify::meta_gradient_error(seed, Order::Second);
        assert!(err <= 1e-4, "seed {seed}: worst rel error {err}");
    }
}

/// A single-task batch must make uniform and weightgen modes coincide: one
/// weight normalized over itself is 1.
#[test]
fn single_task_weightgen_equals_uniform() {
    let spec = MlpSpec::new(vec![1, 8, 1], Activation::Relu);
    let mut rng = stream_rng(5, streams::TASK);
    let task = SinusoidTask {
        amplitude: 1.5,
        phase: 0.4,
    };
    let ep = sample_sinusoid_episode(&task, 10, 10, &mut rng);

    let run = |mode: Mode| {
        let cfg = MetaConfig {
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_steps: 1,
            meta_batch: 1,
            iterations: 1,
            order: Order::Second,
            mode,
            threshold: 1e9,
            pool_capacity: 1,
            selection_stride: 1,
            loss_kind: LossKind::Mse,
            eval_inner_steps: 1,
            log_every: 1,
        };
        let mut theta = init_params(&spec, 5);
        let mut opt = Adam::new(AdamConfig::with_lr(cfg.outer_lr), theta.dim());
        meta_step(&mut theta, &[ep.clone()], &spec, &cfg, None, &mut opt, 0).unwrap();
        theta
    };

    let a = run(Mode::Uniform).flatten();
    let b = run(Mode::WeightGen).flatten();
    assert_eq!(a, b, "parameter traces diverged");
}

#[test]
fn first_order_gradient_deviates_on_curved_probe() {
    let rep = verify::check_first_order_is_detected(3);
    assert!(rep.passed());
}
