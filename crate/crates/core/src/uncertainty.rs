//! Homoscedastic-uncertainty loss combination: learnable per-task-slot
//! log-variances sᵢ = log σᵢ² weight each task's query loss, with a
//! regularizer that keeps the noise from growing without bound.

use crate::graph::{Graph, GraphError, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Classification,
    Regression,
}

/// Learnable noise parameters, one slot per meta-batch task, persistent
/// across iterations and updated by the meta-optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyState {
    pub s: Vec<f64>,
}

impl UncertaintyState {
    pub fn new(slots: usize) -> Self {
        UncertaintyState { s: vec![0.0; slots] }
    }

    pub fn sigma_sq(&self, i: usize) -> f64 {
        self.s[i].exp()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum UncertaintyError {
    #[error("expected {expected} task losses, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite task loss at slot {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Temperature-scaled softmax: softmax(logits / σ²) per row.
pub fn scaled_softmax(logits: &Tensor, sigma_sq: f64) -> Tensor {
    assert!(sigma_sq > 0.0, "sigma_sq must be positive, got {}", sigma_sq);
    logits.map(|v| v / sigma_sq).softmax_rows()
}

/// Combined objective over graph nodes:
/// classification Σᵢ exp(−sᵢ)·Lᵢ + sᵢ/2, regression Σᵢ ½exp(−sᵢ)·Lᵢ + sᵢ/2.
///
/// `s_nodes` must be scalar graph leaves so the objective is differentiable
/// with respect to both the losses' parameters and s.
pub fn combined_loss_node(
    g: &mut Graph,
    task_losses: &[NodeId],
    s_nodes: &[NodeId],
    kind: LossFamily,
) -> Result<NodeId, UncertaintyError> {
    if task_losses.len() != s_nodes.len() {
        return Err(UncertaintyError::LengthMismatch {
            expected: s_nodes.len(),
            actual: task_losses.len(),
        });
    }
    let loss_coef = match kind {
        LossFamily::Classification => 1.0,
        LossFamily::Regression => 0.5,
    };
    let mut total: Option<NodeId> = None;
    for (i, (&l, &s)) in task_losses.iter().zip(s_nodes.iter()).enumerate() {
        if !g.value(l).item().is_finite() {
            return Err(UncertaintyError::NonFinite(i));
        }
        let neg_s = g.neg(s);
        let w = g.exp(neg_s);
        let scaled = g.scalar_mul(l, loss_coef);
        let weighted = g.mul(w, scaled);
        let reg = g.scalar_mul(s, 0.5);
        let term = g.add(weighted, reg);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    Ok(total.expect("at least one task"))
}

/// Plain-value evaluation of the combined loss (used by tests and oracles).
pub fn combined_loss_value(
    task_losses: &[f64],
    state: &UncertaintyState,
    kind: LossFamily,
) -> Result<f64, UncertaintyError> {
    let mut g = Graph::new();
    let s_nodes: Vec<NodeId> = state.s.iter().map(|&v| g.scalar(v)).collect();
    let l_nodes: Vec<NodeId> = task_losses.iter().map(|&v| g.scalar(v)).collect();
    let out = combined_loss_node(&mut g, &l_nodes, &s_nodes, kind)?;
    Ok(g.value(out).item())
}

/// The s minimizing the single-task combined loss for a fixed positive L:
/// classification s* = log(2L); regression s* = log(L).
pub fn optimal_s_oracle(loss: f64, kind: LossFamily) -> f64 {
    assert!(loss > 0.0, "oracle requires a positive loss, got {}", loss);
    match kind {
        LossFamily::Classification => (2.0 * loss).ln(),
        LossFamily::Regression => loss.ln(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_softmax_symmetry() {
        let t = Tensor::new(vec![1, 2], vec![1.0, 1.0]);
        let p = scaled_softmax(&t, 3.7);
        assert!((p.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scaled_softmax_hand_value() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]);
        let p = scaled_softmax(&t, 1.0);
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn scaled_softmax_flattens_at_high_temperature() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]);
        let p = scaled_softmax(&t, 1e6);
        assert!((p.data()[0] - 0.5).abs() < 1e-5);
        assert!((p.data()[1] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn scaled_softmax_rows_sum_to_one_and_keep_argmax() {
        let t = Tensor::new(vec![2, 3], vec![0.2, -1.0, 2.5, 3.0, 0.1, 0.0]);
        for &s2 in &[0.1, 1.0, 42.0] {
            let p = scaled_softmax(&t, s2);
            for r in 0..2 {
                let row: Vec<f64> = (0..3).map(|c| p.get2(r, c)).collect();
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let base: Vec<f64> = (0..3).map(|c| t.get2(r, c)).collect();
                let am = |v: &[f64]| {
                    v.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                };
                assert_eq!(am(&row), am(&base));
            }
        }
    }

    #[test]
    fn zero_s_equals_unweighted_sum() {
        let st = UncertaintyState::new(2);
        let v = combined_loss_value(&[2.0, 4.0], &st, LossFamily::Classification).unwrap();
        assert_eq!(v, 6.0);
    }

    #[test]
    fn classification_hand_value() {
        let st = UncertaintyState { s: vec![4.0f64.ln()] };
        let v = combined_loss_value(&[1.0], &st, LossFamily::Classification).unwrap();
        assert!((v - (0.25 + 4.0f64.ln() / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn regression_hand_value() {
        let st = UncertaintyState::new(1);
        let v = combined_loss_value(&[1.0], &st, LossFamily::Regression).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn oracle_values() {
        assert!((optimal_s_oracle(0.5, LossFamily::Classification)).abs() < 1e-15);
        assert!((optimal_s_oracle(1.0, LossFamily::Regression)).abs() < 1e-15);
        assert!((optimal_s_oracle(2.0, LossFamily::Classification) - 4.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn effective_weight_decreases_in_s() {
        let mut prev = f64::INFINITY;
        for i in 0..10 {
            let s = -2.0 + i as f64 * 0.5;
            let w = (-s as f64).exp();
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn gradient_descent_on_s_recovers_oracle() {
        // fixed losses; descend on s alone
        let losses = [0.7, 2.3];
        let mut s = vec![0.0f64, 0.0f64];
        for _ in 0..2000 {
            for i in 0..2 {
                // d/ds [exp(-s)L + s/2] = -exp(-s)L + 1/2
                let grad = -(-s[i]).exp() * losses[i] + 0.5;
                s[i] -= 0.1 * grad;
            }
        }
        for i in 0..2 {
            let target = optimal_s_oracle(losses[i], LossFamily::Classification);
            assert!((s[i] - target).abs() < 1e-6, "slot {}: {} vs {}", i, s[i], target);
        }
    }

    #[test]
    fn grad_wrt_s_matches_finite_differences() {
        let losses = [1.3, 0.4];
        let s0 = [0.3, -0.7];
        let mut g = Graph::new();
        let s_nodes: Vec<NodeId> = s0.iter().map(|&v| g.scalar(v)).collect();
        let l_nodes: Vec<NodeId> = losses.iter().map(|&v| g.scalar(v)).collect();
        let out =
            combined_loss_node(&mut g, &l_nodes, &s_nodes, LossFamily::Classification).unwrap();
        let grads = g.backward(out, &s_nodes).unwrap();
        for i in 0..2 {
            let h = 1e-6;
            let f = |si: f64| -> f64 {
                let st = UncertaintyState {
                    s: {
                        let mut v = s0.to_vec();
                        v[i] = si;
                        v
                    },
                };
                combined_loss_value(&losses, &st, LossFamily::Classification).unwrap()
            };
            let fd = (f(s0[i] + h) - f(s0[i] - h)) / (2.0 * h);
            let an = g.value(grads[i]).item();
            assert!(
                (fd - an).abs() / an.abs().max(1e-8) < 1e-6,
                "slot {}: fd {} vs {}",
                i,
                fd,
                an
            );
        }
    }
}
