//! Contrast-loss weight generator: turns per-task support/query losses into
//! normalized meta-loss weights. Tasks that fit poorly on the support set
//! (loss above the threshold) keep full weight; among well-fitted tasks the
//! weight is proportional to the query-minus-support gap.

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct WeightConfig {
    /// Support-loss cutoff τ for the "not trained well" branch.
    pub threshold: f64,
    /// Clamp for negative gaps. 0 drops such tasks from the mix entirely.
    pub floor: f64,
    /// Ablation switch: keep signed gaps instead of clamping at `floor`.
    pub allow_signed: bool,
}

impl WeightConfig {
    pub fn new(threshold: f64) -> Self {
        assert!(threshold > 0.0, "threshold must be positive");
        WeightConfig {
            threshold,
            floor: 0.0,
            allow_signed: false,
        }
    }

    /// Chance-level cross-entropy for `way` classes.
    pub fn for_classification(way: usize) -> Self {
        WeightConfig::new((way as f64).ln())
    }

    pub fn for_regression() -> Self {
        WeightConfig::new(1.0)
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WeightError {
    #[error("support and query loss vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty loss vector")]
    Empty,
    #[error("non-finite loss at task {0}")]
    NonFinite(usize),
}

/// Normalized meta-loss weights; always a probability simplex.
pub fn compute_weights(
    support_losses: &[f64],
    query_losses: &[f64],
    cfg: &WeightConfig,
) -> Result<Vec<f64>, WeightError> {
    if support_losses.len() != query_losses.len() {
        return Err(WeightError::LengthMismatch(
            support_losses.len(),
            query_losses.len(),
        ));
    }
    if support_losses.is_empty() {
        return Err(WeightError::Empty);
    }
    let n = support_losses.len();
    let mut raw = Vec::with_capacity(n);
    for i in 0..n {
        let (s, q) = (support_losses[i], query_losses[i]);
        if !s.is_finite() || !q.is_finite() {
            return Err(WeightError::NonFinite(i));
        }
        let r = if s > cfg.threshold {
            1.0
        } else if cfg.allow_signed {
            q - s
        } else {
            (q - s).max(cfg.floor)
        };
        raw.push(r);
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Ok(vec![1.0 / n as f64; n]);
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> WeightConfig {
        WeightConfig::new(1.0)
    }

    #[test]
    fn single_task_gets_weight_one() {
        let w = compute_weights(&[0.3], &[0.9], &cfg()).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn gap_ratio_below_threshold() {
        let w = compute_weights(&[0.1, 0.2], &[0.3, 0.6], &cfg()).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn threshold_branch_assigns_one_then_normalizes() {
        let w = compute_weights(&[2.0, 0.1], &[2.5, 0.3], &cfg()).unwrap();
        assert!((w[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((w[1] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_all_zero_falls_back_to_uniform() {
        let w = compute_weights(&[0.5, 0.5], &[0.4, 0.4], &cfg()).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn nan_input_rejected() {
        assert_eq!(
            compute_weights(&[f64::NAN], &[0.1], &cfg()),
            Err(WeightError::NonFinite(0))
        );
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(compute_weights(&[0.1], &[0.1, 0.2], &cfg()).is_err());
    }

    #[test]
    fn monotone_in_gap() {
        let w = compute_weights(&[0.1, 0.1, 0.1], &[0.5, 0.3, 0.9], &cfg()).unwrap();
        assert!(w[2] > w[0] && w[0] > w[1]);
    }

    #[test]
    fn scale_invariance_of_gaps() {
        let a = compute_weights(&[0.0, 0.0], &[0.2, 0.6], &cfg()).unwrap();
        let b = compute_weights(&[0.0, 0.0], &[0.02, 0.06], &cfg()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
