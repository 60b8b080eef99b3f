use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub center: f64,
    pub width: f64,
    pub density: f64,
}

/// Square-root rule, at least one bin.
pub fn histogram_bins(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

/// Equal-width bins over `[min, max]`, normalized so that
/// `sum(density * width) == 1`. When every value is equal the support is
/// `[v - 0.5, v + 0.5]`.
pub fn density_histogram(values: &[f64], bins: usize) -> Result<Vec<HistogramBin>> {
    if values.is_empty() {
        return Err(Error::Input("histogram of an empty set".into()));
    }
    if bins == 0 {
        return Err(Error::Input("histogram needs at least one bin".into()));
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::Input("histogram of non-finite values".into()));
    }
    let (lo, hi) = if min == max {
        (min - 0.5, max + 0.5)
    } else {
        (min, max)
    };
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = ((v - lo) / width).floor() as usize;
        counts[idx.min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| HistogramBin {
            center: lo + (i as f64 + 0.5) * width,
            width,
            density: c as f64 / (n * width),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn integral(h: &[HistogramBin]) -> f64 {
        h.iter().map(|b| b.density * b.width).sum()
    }

    #[test]
    fn single_value_fills_one_bin() {
        let h = density_histogram(&[4.0], 5).unwrap();
        assert_eq!(h.iter().filter(|b| b.density > 0.0).count(), 1);
        assert!((integral(&h) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_values_give_flat_density() {
        let values: Vec<f64> = (0..10).map(f64::from).collect();
        let h = density_histogram(&values, 10).unwrap();
        assert!(h.iter().all(|b| (b.density - h[0].density).abs() < 1e-12));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(density_histogram(&[], 3).is_err());
    }
}
