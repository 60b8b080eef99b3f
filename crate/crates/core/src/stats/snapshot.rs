use std::path::Path;

use super::{
    density_histogram, filter_l1_norms, fit_gaussian, histogram_bins, qq_linearity, qq_points,
    FilterNormSet, GaussianFit, HistogramBin, QqLinearity, QqSeries,
};
use crate::csv::{create_dir, Table};
use crate::error::Result;
use crate::model::checkpoint::{weight_name, Checkpoint};

/// Distribution diagnostics for one conv layer.
#[derive(Debug, Clone)]
pub struct LayerSnapshot {
    pub norms: FilterNormSet,
    pub fit: GaussianFit,
    pub qq: QqSeries,
    /// `None` for layers with fewer than three filters.
    pub linearity: Option<QqLinearity>,
    pub histogram: Vec<HistogramBin>,
}

impl LayerSnapshot {
    pub fn layer(&self) -> usize {
        self.norms.layer
    }
}

/// One record per conv layer, in layer order.
pub fn snapshot_distributions(ckpt: &Checkpoint) -> Result<Vec<LayerSnapshot>> {
    ckpt.graph
        .conv_indices()
        .into_iter()
        .map(|i| {
            let norms = filter_l1_norms(i, ckpt.tensor(&weight_name(i))?)?;
            let fit = fit_gaussian(&norms)?;
            let qq = qq_points(&norms)?;
            let linearity = if norms.norms.len() >= 3 {
                Some(qq_linearity(&qq)?)
            } else {
                None
            };
            let histogram = density_histogram(&norms.norms, histogram_bins(norms.norms.len()))?;
            Ok(LayerSnapshot {
                norms,
                fit,
                qq,
                linearity,
                histogram,
            })
        })
        .collect()
}

/// Writes `norms_<layer>.csv`, `qq_<layer>.csv`, `hist_<layer>.csv` for each
/// layer plus `gauss_summary.csv`.
pub fn write_snapshots(snapshots: &[LayerSnapshot], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut summary = Table::new(&[
        "layer",
        "n",
        "mu",
        "sigma",
        "qq_slope",
        "qq_intercept",
        "r2",
    ]);
    for s in snapshots {
        let layer = s.layer();
        let mut norms = Table::new(&["filter_index", "norm"]);
        for (j, v) in s.norms.norms.iter().enumerate() {
            norms.row(&[&j, v]);
        }
        norms.write(&dir.join(format!("norms_{layer}.csv")))?;

        let mut qq = Table::new(&["theoretical", "sample"]);
        for (t, x) in &s.qq.points {
            qq.row(&[t, x]);
        }
        qq.write(&dir.join(format!("qq_{layer}.csv")))?;

        let mut hist = Table::new(&["bin_center", "density"]);
        for b in &s.histogram {
            hist.row(&[&b.center, &b.density]);
        }
        hist.write(&dir.join(format!("hist_{layer}.csv")))?;

        let (slope, intercept, r2) = match s.linearity {
            Some(l) => (
                l.slope.to_string(),
                l.intercept.to_string(),
                l.r2.to_string(),
            ),
            None => Default::default(),
        };
        summary.row(&[
            &layer,
            &s.fit.n,
            &s.fit.mu,
            &s.fit.sigma,
            &slope,
            &intercept,
            &r2,
        ]);
    }
    summary.write(&dir.join("gauss_summary.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, init_params, Arch};

    #[test]
    fn one_record_per_conv_layer() {
        let g = build(Arch::Vgg16, 10, [3, 32, 32]).unwrap();
        let snaps = snapshot_distributions(&init_params(&g, 0).unwrap()).unwrap();
        assert_eq!(snaps.len(), 13);
        assert_eq!(snaps[1].norms.norms.len(), 64);
    }

    #[test]
    fn writes_files_per_layer() {
        let g = build(Arch::ToyCnn, 4, [3, 16, 16]).unwrap();
        let snaps = snapshot_distributions(&init_params(&g, 0).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_snapshots(&snaps, dir.path()).unwrap();
        let summary = std::fs::read_to_string(dir.path().join("gauss_summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 4);
        for s in &snaps {
            let qq =
                std::fs::read_to_string(dir.path().join(format!("qq_{}.csv", s.layer()))).unwrap();
            assert_eq!(qq.lines().count(), s.norms.norms.len() + 1);
        }
    }
}
