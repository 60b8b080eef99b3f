use std::fs;

use pfgdf::config::RunConfig;
use pfgdf::driver::auto_prune;
use pfgdf::model::checkpoint::Checkpoint;
use pfgdf::model::{build, init_params, Arch};
use pfgdf::report::{
    emit, load_report, recovery_file, summarize, PruneReport, LAYERS_FILE, SUMMARY_FILE,
};
use pfgdf::train::{CurvePoint, RetrainJob, RetrainOutcome, Trainer};

/// Accepts every α after a per-layer number of recovery epochs.
struct Fixed;

impl Trainer for Fixed {
    fn evaluate(&mut self, _: &Checkpoint) -> pfgdf::Result<f64> {
        Ok(0.8)
    }

    fn retrain(&mut self, ckpt: &Checkpoint, job: &RetrainJob) -> pfgdf::Result<RetrainOutcome> {
        let curve: Vec<CurvePoint> = (1..=job.layer % 5 + 1)
            .map(|epoch| CurvePoint {
                epoch,
                accuracy: 0.7 + 0.05 * epoch as f64,
            })
            .collect();
        let mut checkpoint = ckpt.clone();
        checkpoint.meta.accuracy = Some(0.85);
        Ok(RetrainOutcome {
            checkpoint,
            best_accuracy: curve.last().unwrap().accuracy,
            curve,
            diverged: false,
        })
    }
}

fn scripted_report() -> PruneReport {
    let graph = build(Arch::Vgg11, 10, [3, 32, 32]).unwrap();
    let mut base = init_params(&graph, 8).unwrap();
    base.meta.baseline_accuracy = 0.72;
    let cfg = RunConfig::default();
    let run = auto_prune(&base, &mut Fixed, &cfg).unwrap();
    summarize(&base, &run.checkpoint, &run.records).unwrap()
}

#[test]
fn emitted_files_agree_with_the_report() {
    let report = scripted_report();
    let dir = tempfile::tempdir().unwrap();
    emit(&report, dir.path()).unwrap();

    assert_eq!(load_report(&dir.path().join(SUMMARY_FILE)).unwrap(), report);

    let layers = fs::read_to_string(dir.path().join(LAYERS_FILE)).unwrap();
    let rows: Vec<&str> = layers.lines().collect();
    assert_eq!(rows[0], "layer,original,kept,alpha");
    assert_eq!(rows.len() - 1, report.per_layer.len());
    assert_eq!(report.per_layer.len(), 8);
    assert!(!layers.contains('\r'));

    for l in &report.per_layer {
        let csv = fs::read_to_string(dir.path().join(recovery_file(l.layer))).unwrap();
        assert_eq!(csv.lines().count() - 1, l.recovery_curve.len());
    }
}

#[test]
fn stored_percentages_recompute_from_counts() {
    let r = scripted_report();
    let pct = |b: f64, p: f64| (b - p) / b * 100.0;
    assert_eq!(
        r.reductions.filters.percent,
        pct(r.baseline.filters as f64, r.pruned.filters as f64)
    );
    assert_eq!(
        r.reductions.params.percent,
        pct(r.baseline.params as f64, r.pruned.params as f64)
    );
    assert_eq!(
        r.reductions.flops.percent,
        pct(r.baseline.flops as f64, r.pruned.flops as f64)
    );
    assert_eq!(
        r.reductions.filters.display,
        format!("{:.2}%", r.reductions.filters.percent)
    );
    let kept: usize = r.per_layer.iter().map(|l| l.kept_filters).sum();
    assert_eq!(kept, r.pruned.filters);
    assert_eq!(r.pruned.accuracy, 0.8);
}

#[test]
fn emission_is_byte_stable() {
    let report = scripted_report();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit(&report, a.path()).unwrap();
    emit(&report, b.path()).unwrap();
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap()
        );
    }
}
