//! Distribution of per-filter L1 norms: Gaussian fit, QQ diagnostics and
//! histograms.

mod histogram;
mod normal;
mod qq;
mod snapshot;

pub use histogram::{density_histogram, histogram_bins, HistogramBin};
pub use normal::{inverse_normal_cdf, normal_cdf};
pub use qq::{qq_linearity, qq_points, QqLinearity, QqSeries};
pub use snapshot::{snapshot_distributions, write_snapshots, LayerSnapshot};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// L1 norm of every filter of one conv layer, in filter order.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterNormSet {
    pub layer: usize,
    pub norms: Vec<f64>,
}

/// `norms[j] = sum |weight[j, ..]|` for a `[Cout, Cin, kH, kW]` weight,
/// accumulated in f64.
pub fn filter_l1_norms(layer: usize, weight: &Tensor) -> Result<FilterNormSet> {
    if weight.ndim() != 4 {
        return Err(Error::Input(format!(
            "filter norms need a 4-D conv weight, got shape {:?}",
            weight.shape()
        )));
    }
    let per_filter = weight.numel() / weight.shape()[0];
    let norms = weight
        .data()
        .chunks(per_filter)
        .map(|f| f.iter().map(|&v| (v as f64).abs()).sum())
        .collect();
    Ok(FilterNormSet { layer, norms })
}

/// Mean and population standard deviation of one layer's norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub layer: usize,
    pub n: usize,
    pub mu: f64,
    pub sigma: f64,
}

/// Corrected two-pass estimate. `sigma` is exactly 0 iff all norms are equal.
pub fn fit_gaussian(set: &FilterNormSet) -> Result<GaussianFit> {
    let x = &set.norms;
    let Some(&first) = x.first() else {
        return Err(Error::Input(format!(
            "layer {}: no norms to fit",
            set.layer
        )));
    };
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!(
            "layer {}: non-finite norm {bad}",
            set.layer
        )));
    }
    let n = x.len() as f64;
    if x.iter().all(|&v| v == first) {
        return Ok(GaussianFit {
            layer: set.layer,
            n: x.len(),
            mu: first,
            sigma: 0.0,
        });
    }
    let mean = x.iter().sum::<f64>() / n;
    let (mut sq, mut comp) = (0.0, 0.0);
    for &v in x {
        let d = v - mean;
        sq += d * d;
        comp += d;
    }
    let var = (sq - comp * comp / n) / n;
    Ok(GaussianFit {
        layer: set.layer,
        n: x.len(),
        mu: mean + comp / n,
        sigma: var.max(f64::MIN_POSITIVE).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(norms: &[f64]) -> FilterNormSet {
        FilterNormSet {
            layer: 0,
            norms: norms.to_vec(),
        }
    }

    #[test]
    fn norms_sum_absolute_entries() {
        let w = Tensor::from_vec(
            vec![2, 1, 2, 2],
            vec![1.0, -1.0, 2.0, -2.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        assert_eq!(filter_l1_norms(3, &w).unwrap().norms, vec![6.0, 0.0]);
        assert!(filter_l1_norms(0, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn population_convention() {
        let fit = fit_gaussian(&set(&[-1.0, 1.0])).unwrap();
        assert_eq!((fit.mu, fit.sigma), (0.0, 1.0));
    }

    #[test]
    fn constant_norms_have_zero_sigma() {
        let fit = fit_gaussian(&set(&[0.1; 7])).unwrap();
        assert_eq!((fit.mu, fit.sigma), (0.1, 0.0));
        assert!(fit_gaussian(&set(&[])).is_err());
    }
}
