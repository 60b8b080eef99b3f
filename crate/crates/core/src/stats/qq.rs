use serde::{Deserialize, Serialize};

use super::{inverse_normal_cdf, FilterNormSet};
use crate::error::{Error, Result};

/// `(theoretical, sample)` quantile pairs, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct QqSeries {
    pub layer: usize,
    pub points: Vec<(f64, f64)>,
}

/// Least-squares line through a QQ series. On a normal sample the slope
/// estimates the std and the intercept the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqLinearity {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// All sample quantiles equal; `r2` is reported as 0.
    pub degenerate: bool,
}

/// Sorted norms against `Φ⁻¹((i - 0.5) / n)`.
pub fn qq_points(set: &FilterNormSet) -> Result<QqSeries> {
    if set.norms.is_empty() {
        return Err(Error::Input(format!(
            "layer {}: no norms for a QQ series",
            set.layer
        )));
    }
    let mut sorted = set.norms.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let points = sorted
        .into_iter()
        .enumerate()
        .map(|(i, x)| Ok((inverse_normal_cdf((i as f64 + 0.5) / n)?, x)))
        .collect::<Result<_>>()?;
    Ok(QqSeries {
        layer: set.layer,
        points,
    })
}

pub fn qq_linearity(series: &QqSeries) -> Result<QqLinearity> {
    let pts = &series.points;
    if pts.len() < 3 {
        return Err(Error::Input(format!(
            "layer {}: QQ linearity needs at least 3 points, got {}",
            series.layer,
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pts {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if syy == 0.0 {
        return Ok(QqLinearity {
            slope: 0.0,
            intercept: my,
            r2: 0.0,
            degenerate: true,
        });
    }
    let slope = sxy / sxx;
    Ok(QqLinearity {
        slope,
        intercept: my - slope * mx,
        r2: (sxy * sxy / (sxx * syy)).min(1.0),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_sits_at_the_median() {
        let s = qq_points(&FilterNormSet {
            layer: 0,
            norms: vec![2.5],
        })
        .unwrap();
        assert_eq!(s.points, vec![(0.0, 2.5)]);
    }

    #[test]
    fn exact_quantiles_are_a_perfect_line() {
        let n = 50;
        let norms = (0..n)
            .map(|i| 3.0 + 0.5 * inverse_normal_cdf((i as f64 + 0.5) / n as f64).unwrap())
            .rev()
            .collect();
        let fit = qq_linearity(&qq_points(&FilterNormSet { layer: 0, norms }).unwrap()).unwrap();
        assert!(fit.r2 > 0.99);
        assert!((fit.slope - 0.5).abs() < 1e-12 && (fit.intercept - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_sample_is_flagged() {
        let s = qq_points(&FilterNormSet {
            layer: 0,
            norms: vec![1.0; 5],
        })
        .unwrap();
        let fit = qq_linearity(&s).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.r2, 0.0);
    }

    #[test]
    fn too_few_points() {
        let s = qq_points(&FilterNormSet {
            layer: 0,
            norms: vec![1.0, 2.0],
        })
        .unwrap();
        assert!(qq_linearity(&s).is_err());
    }
}
