use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{FilterNormSet, GaussianFit};

/// Partition of one layer's filters by the open interval
/// `(mu - alpha * sigma, mu + alpha * sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub layer: usize,
    pub alpha: f64,
    pub keep: Vec<usize>,
    /// Norm `<= mu - alpha * sigma`.
    pub removed_low: Vec<usize>,
    /// Norm `>= mu + alpha * sigma`.
    pub removed_high: Vec<usize>,
    pub mu: f64,
    pub sigma: f64,
    /// `sigma == 0` or the interval held no filter, so everything is kept.
    pub degenerate: bool,
}

impl PruneDecision {
    pub fn removes_nothing(&self) -> bool {
        self.removed_low.is_empty() && self.removed_high.is_empty()
    }

    pub fn total(&self) -> usize {
        self.keep.len() + self.removed_low.len() + self.removed_high.len()
    }
}

pub fn select_keep_set(
    norms: &FilterNormSet,
    fit: &GaussianFit,
    alpha: f64,
) -> Result<PruneDecision> {
    // also rejects NaN
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::Input(format!("alpha must be positive, got {alpha}")));
    }
    if norms.norms.is_empty() {
        return Err(Error::Input(format!(
            "layer {}: no filters to select from",
            norms.layer
        )));
    }
    let lo = fit.mu - alpha * fit.sigma;
    let hi = fit.mu + alpha * fit.sigma;
    let mut decision = PruneDecision {
        layer: norms.layer,
        alpha,
        keep: Vec::new(),
        removed_low: Vec::new(),
        removed_high: Vec::new(),
        mu: fit.mu,
        sigma: fit.sigma,
        degenerate: false,
    };
    for (j, &x) in norms.norms.iter().enumerate() {
        if x <= lo {
            decision.removed_low.push(j);
        } else if x >= hi {
            decision.removed_high.push(j);
        } else {
            decision.keep.push(j);
        }
    }
    if fit.sigma == 0.0 || decision.keep.is_empty() {
        decision.keep = (0..norms.norms.len()).collect();
        decision.removed_low.clear();
        decision.removed_high.clear();
        decision.degenerate = true;
    }
    Ok(decision)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(mu: f64, sigma: f64) -> GaussianFit {
        GaussianFit {
            layer: 0,
            n: 0,
            mu,
            sigma,
        }
    }

    #[test]
    fn open_interval_partition() {
        let norms = FilterNormSet {
            layer: 2,
            norms: vec![-0.5, -0.2, 0.0, 0.25, 0.31],
        };
        let d = select_keep_set(&norms, &fit(0.0, 1.0), 0.3).unwrap();
        assert_eq!(d.keep, vec![1, 2, 3]);
        assert_eq!(d.removed_low, vec![0]);
        assert_eq!(d.removed_high, vec![4]);
        assert!(!d.degenerate);
    }

    #[test]
    fn boundary_values_are_removed() {
        let norms = FilterNormSet {
            layer: 0,
            norms: vec![-1.0, 0.0, 1.0],
        };
        let d = select_keep_set(&norms, &fit(0.0, 1.0), 1.0).unwrap();
        assert_eq!(
            (d.keep, d.removed_low, d.removed_high),
            (vec![1], vec![0], vec![2])
        );
    }

    #[test]
    fn zero_sigma_keeps_all() {
        let norms = FilterNormSet {
            layer: 0,
            norms: vec![2.0; 4],
        };
        let d = select_keep_set(&norms, &fit(2.0, 0.0), 0.3).unwrap();
        assert!(d.degenerate && d.removes_nothing());
        assert_eq!(d.keep, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_interval_keeps_all() {
        let norms = FilterNormSet {
            layer: 0,
            norms: vec![0.0, 10.0],
        };
        let d = select_keep_set(&norms, &fit(5.0, 5.0), 0.3).unwrap();
        assert!(d.degenerate);
        assert_eq!(d.keep, vec![0, 1]);
    }

    #[test]
    fn non_positive_alpha_is_rejected() {
        let norms = FilterNormSet {
            layer: 0,
            norms: vec![1.0],
        };
        for alpha in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                select_keep_set(&norms, &fit(1.0, 0.0), alpha),
                Err(Error::Input(_))
            ));
        }
    }
}
