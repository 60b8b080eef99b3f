//! The automatic pruning loop: layers from last to first, an ascending α
//! search per layer, an accuracy gate and a one-step rollback of the
//! previously pruned layer when a layer cannot recover.

use serde::{Deserialize, Serialize};

use crate::config::{GateSplit, RunConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint::{weight_name, Checkpoint};
use crate::prune::{prune_conv_pair, reinit_pruned_layer, select_keep_set, PruneDecision};
use crate::stats::{filter_l1_norms, fit_gaussian};
use crate::train::{CurvePoint, RetrainJob, Trainer};

/// One α the search retrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaTrial {
    pub alpha: f64,
    pub grid_index: usize,
    pub kept: usize,
    /// Best gate-split accuracy reached; 0 when retraining diverged.
    pub accuracy: f64,
    pub diverged: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepAllReason {
    /// The interval at the first α tried already contains every filter, and
    /// wider intervals can only contain more.
    IntervalCoversAll,
    /// No α that removes filters passed the gate.
    GridExhausted,
    /// The global retraining budget ran out before this layer was searched.
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSearchRecord {
    pub layer: usize,
    pub original_filters: usize,
    /// Fit of the layer's norms when it was last searched.
    pub mu: f64,
    pub sigma: f64,
    /// Every α retrained for this layer, across rollbacks, in call order.
    pub tried: Vec<AlphaTrial>,
    /// `None` means the layer was left whole.
    pub accepted: Option<PruneDecision>,
    pub accepted_grid_index: Option<usize>,
    pub keep_all_reason: Option<KeepAllReason>,
    /// Retraining curve of the accepted α.
    pub recovery_curve: Vec<CurvePoint>,
    /// Times this layer triggered a rollback of the previous layer.
    pub rollback_events: usize,
}

impl LayerSearchRecord {
    fn new(layer: usize, original_filters: usize) -> Self {
        Self {
            layer,
            original_filters,
            mu: 0.0,
            sigma: 0.0,
            tried: Vec::new(),
            accepted: None,
            accepted_grid_index: None,
            keep_all_reason: None,
            recovery_curve: Vec::new(),
            rollback_events: 0,
        }
    }

    pub fn kept_filters(&self) -> usize {
        self.accepted
            .as_ref()
            .map_or(self.original_filters, |d| d.keep.len())
    }

    pub fn accepted_alpha(&self) -> Option<f64> {
        self.accepted.as_ref().map(|d| d.alpha)
    }
}

#[derive(Debug, Clone)]
pub struct PruneRun {
    pub checkpoint: Checkpoint,
    /// One record per prunable conv, in visiting order (descending layer).
    pub records: Vec<LayerSearchRecord>,
    /// Accuracy every acceptance was gated on, before subtracting epsilon.
    pub reference_accuracy: f64,
    pub retrain_calls: usize,
}

/// Upper bound on retraining calls for one `auto_prune` run.
pub fn retrain_budget(prunable_layers: usize, cfg: &RunConfig) -> usize {
    prunable_layers * cfg.alpha_grid.len() * (1 + cfg.max_rollbacks)
}

struct Search<'a, T: Trainer> {
    trainer: &'a mut T,
    cfg: &'a RunConfig,
    target: f64,
    budget: usize,
    calls: usize,
}

#[allow(clippy::large_enum_variant)] // one short-lived value per search step
enum Found {
    Accepted {
        checkpoint: Checkpoint,
        decision: PruneDecision,
        grid_index: usize,
        curve: Vec<CurvePoint>,
    },
    KeepAll(KeepAllReason),
}

impl<T: Trainer> Search<'_, T> {
    /// Tries grid values from `start` upwards on `ckpt`, appending trials to
    /// `record`. `ckpt` itself is never modified.
    fn layer(
        &mut self,
        ckpt: &Checkpoint,
        layer: usize,
        start: usize,
        record: &mut LayerSearchRecord,
    ) -> Result<Found> {
        let norms = filter_l1_norms(layer, ckpt.tensor(&weight_name(layer))?)?;
        let fit = fit_gaussian(&norms)?;
        record.mu = fit.mu;
        record.sigma = fit.sigma;
        let mut retrained = false;
        for (grid_index, &alpha) in self.cfg.alpha_grid.iter().enumerate().skip(start) {
            let decision = select_keep_set(&norms, &fit, alpha)?;
            if decision.removes_nothing() {
                log::info!("layer {layer}: alpha {alpha} keeps every filter");
                return Ok(Found::KeepAll(if retrained {
                    KeepAllReason::GridExhausted
                } else {
                    KeepAllReason::IntervalCoversAll
                }));
            }
            if self.calls >= self.budget {
                log::warn!(
                    "layer {layer}: retraining budget of {} calls exhausted",
                    self.budget
                );
                return Ok(Found::KeepAll(KeepAllReason::BudgetExhausted));
            }
            let mut pruned = prune_conv_pair(ckpt, layer, &decision)?;
            if !self.cfg.keep_pruned_weights {
                pruned = reinit_pruned_layer(&pruned, layer, self.cfg.seed)?;
            }
            let job = RetrainJob {
                layer,
                alpha,
                grid_index,
                target: self.target,
                epochs: self.cfg.retrain_epochs(),
            };
            self.calls += 1;
            retrained = true;
            let outcome = self.trainer.retrain(&pruned, &job)?;
            let passed = !outcome.diverged && outcome.best_accuracy >= self.target;
            log::info!(
                "layer {layer}: alpha {alpha} keeps {}/{} filters, accuracy {:.4} ({})",
                decision.keep.len(),
                decision.total(),
                outcome.best_accuracy,
                if passed { "accepted" } else { "rejected" }
            );
            record.tried.push(AlphaTrial {
                alpha,
                grid_index,
                kept: decision.keep.len(),
                accuracy: outcome.best_accuracy,
                diverged: outcome.diverged,
                passed,
            });
            if passed {
                return Ok(Found::Accepted {
                    checkpoint: outcome.checkpoint,
                    decision,
                    grid_index,
                    curve: outcome.curve,
                });
            }
        }
        Ok(Found::KeepAll(KeepAllReason::GridExhausted))
    }
}

fn settle(record: &mut LayerSearchRecord, found: Found, input: &Checkpoint) -> Checkpoint {
    match found {
        Found::Accepted {
            checkpoint,
            decision,
            grid_index,
            curve,
        } => {
            record.accepted = Some(decision);
            record.accepted_grid_index = Some(grid_index);
            record.keep_all_reason = None;
            record.recovery_curve = curve;
            checkpoint
        }
        Found::KeepAll(reason) => {
            record.accepted = None;
            record.accepted_grid_index = None;
            record.keep_all_reason = Some(reason);
            record.recovery_curve.clear();
            input.clone()
        }
    }
}

/// Searches a single layer of `ckpt` against `target` accuracy. Returns the
/// accepted checkpoint, or `ckpt` unchanged with a keep-all record.
pub fn search_layer<T: Trainer>(
    ckpt: &Checkpoint,
    layer: usize,
    trainer: &mut T,
    cfg: &RunConfig,
    target: f64,
) -> Result<(Checkpoint, LayerSearchRecord)> {
    cfg.validate()?;
    let spec = ckpt
        .graph
        .layers
        .get(layer)
        .filter(|l| l.prunable)
        .ok_or_else(|| Error::Policy(format!("layer {layer} is not a prunable conv")))?;
    let mut record = LayerSearchRecord::new(layer, spec.out_channels);
    let mut search = Search {
        trainer,
        cfg,
        target,
        budget: usize::MAX,
        calls: 0,
    };
    let found = search.layer(ckpt, layer, 0, &mut record)?;
    let out = settle(&mut record, found, ckpt);
    Ok((out, record))
}

/// Gate reference: the recorded best eval accuracy, or the baseline's
/// measured train accuracy when the gate runs on the training split.
fn reference_accuracy<T: Trainer>(
    baseline: &Checkpoint,
    trainer: &mut T,
    cfg: &RunConfig,
) -> Result<f64> {
    match cfg.gate_split {
        GateSplit::Eval => Ok(baseline.meta.baseline_accuracy),
        GateSplit::Train => trainer.evaluate(baseline),
    }
}

/// Prunes every prunable conv of `baseline`, last layer first.
pub fn auto_prune<T: Trainer>(
    baseline: &Checkpoint,
    trainer: &mut T,
    cfg: &RunConfig,
) -> Result<PruneRun> {
    cfg.validate()?;
    baseline.validate()?;
    let reference = reference_accuracy(baseline, trainer, cfg)?;
    let mut layers = baseline.graph.prunable_indices();
    layers.reverse();
    let mut search = Search {
        trainer,
        cfg,
        target: reference - cfg.acceptance_epsilon,
        budget: retrain_budget(layers.len(), cfg),
        calls: 0,
    };

    let mut current = baseline.clone();
    let mut records: Vec<LayerSearchRecord> = Vec::with_capacity(layers.len());
    // checkpoint each visited layer was searched on
    let mut inputs: Vec<Checkpoint> = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let mut record = LayerSearchRecord::new(layer, baseline.graph.layers[layer].out_channels);
        loop {
            let found = search.layer(&current, layer, 0, &mut record)?;
            if !matches!(found, Found::KeepAll(KeepAllReason::GridExhausted)) {
                inputs.push(current.clone());
                current = settle(&mut record, found, &current);
                break;
            }
            let rollback = records
                .last()
                .and_then(|prev| prev.accepted_grid_index)
                .map(|g| g + 1)
                .filter(|&next| {
                    next < cfg.alpha_grid.len() && record.rollback_events < cfg.max_rollbacks
                });
            let Some(next) = rollback else {
                inputs.push(current.clone());
                current = settle(&mut record, found, &current);
                break;
            };
            let prev = records.last_mut().expect("rollback needs a previous layer");
            let prev_input = inputs.last().expect("one input per record");
            log::info!(
                "layer {layer}: no alpha recovered, relaxing layer {} to grid index {next}",
                prev.layer
            );
            record.rollback_events += 1;
            let found = search.layer(prev_input, prev.layer, next, prev)?;
            current = settle(prev, found, prev_input);
        }
        records.push(record);
    }

    current.meta.accuracy = Some(search.trainer.evaluate(&current)?);
    Ok(PruneRun {
        checkpoint: current,
        records,
        reference_accuracy: reference,
        retrain_calls: search.calls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, init_params, Arch};
    use crate::train::RetrainOutcome;

    /// Accuracy as a function of the pruned checkpoint's conv widths.
    struct Scripted<F: FnMut(&Checkpoint, &RetrainJob) -> f64> {
        accuracy: F,
        jobs: Vec<(usize, f64)>,
    }

    impl<F: FnMut(&Checkpoint, &RetrainJob) -> f64> Trainer for Scripted<F> {
        fn evaluate(&mut self, _: &Checkpoint) -> Result<f64> {
            Ok(0.5)
        }

        fn retrain(&mut self, ckpt: &Checkpoint, job: &RetrainJob) -> Result<RetrainOutcome> {
            self.jobs.push((job.layer, job.alpha));
            let accuracy = (self.accuracy)(ckpt, job);
            Ok(RetrainOutcome {
                checkpoint: ckpt.clone(),
                best_accuracy: accuracy,
                curve: vec![CurvePoint { epoch: 1, accuracy }],
                diverged: false,
            })
        }
    }

    fn baseline() -> Checkpoint {
        let graph = build(Arch::ToyCnn, 10, [3, 16, 16]).unwrap();
        let mut ckpt = init_params(&graph, 4).unwrap();
        ckpt.meta.baseline_accuracy = 0.9;
        ckpt
    }

    fn width(ckpt: &Checkpoint, layer: usize) -> usize {
        ckpt.graph.layers[layer].out_channels
    }

    #[test]
    fn first_passing_alpha_is_accepted() {
        let cfg = RunConfig::default();
        let mut t = Scripted {
            accuracy: |_: &Checkpoint, job: &RetrainJob| if job.alpha < 0.5 { 0.5 } else { 0.95 },
            jobs: Vec::new(),
        };
        let (out, rec) = search_layer(&baseline(), 8, &mut t, &cfg, 0.9).unwrap();
        assert_eq!(rec.accepted_alpha(), Some(0.5));
        assert_eq!(rec.tried.len(), 2);
        assert_eq!(width(&out, 8), rec.kept_filters());
        assert!(rec.kept_filters() < 32);
    }

    #[test]
    fn exhausted_grid_keeps_the_layer_whole() {
        let cfg = RunConfig::default();
        let base = baseline();
        let mut t = Scripted {
            accuracy: |_: &Checkpoint, _: &RetrainJob| 0.0,
            jobs: Vec::new(),
        };
        let (out, rec) = search_layer(&base, 4, &mut t, &cfg, 0.9).unwrap();
        assert!(out.bit_eq(&base));
        assert_eq!(rec.keep_all_reason, Some(KeepAllReason::GridExhausted));
        assert_eq!(rec.kept_filters(), 16);
    }

    #[test]
    fn visits_layers_last_to_first() {
        let cfg = RunConfig::default();
        let mut t = Scripted {
            accuracy: |_: &Checkpoint, _: &RetrainJob| 1.0,
            jobs: Vec::new(),
        };
        let run = auto_prune(&baseline(), &mut t, &cfg).unwrap();
        let order: Vec<usize> = run.records.iter().map(|r| r.layer).collect();
        assert_eq!(order, [8, 4, 0]);
        assert_eq!(t.jobs, [(8, 0.3), (4, 0.3), (0, 0.3)]);
        run.checkpoint.validate().unwrap();
    }

    #[test]
    fn huge_alpha_prunes_nothing_and_never_retrains() {
        let cfg = RunConfig {
            alpha_grid: vec![1000.0],
            ..RunConfig::default()
        };
        let base = baseline();
        let mut t = Scripted {
            accuracy: |_: &Checkpoint, _: &RetrainJob| 1.0,
            jobs: Vec::new(),
        };
        let run = auto_prune(&base, &mut t, &cfg).unwrap();
        assert!(t.jobs.is_empty());
        assert_eq!(run.checkpoint.tensors, base.tensors);
        assert!(run
            .records
            .iter()
            .all(|r| r.keep_all_reason == Some(KeepAllReason::IntervalCoversAll)));
    }

    #[test]
    fn rollback_relaxes_the_previous_layer_once() {
        let cfg = RunConfig::default();
        let base = baseline();
        let narrow = 32 - 16; // anything under this on layer 8 starves layer 4
        let mut t = Scripted {
            accuracy: move |c: &Checkpoint, job: &RetrainJob| {
                if job.layer == 4 && width(c, 8) < narrow {
                    0.0
                } else {
                    1.0
                }
            },
            jobs: Vec::new(),
        };
        let run = auto_prune(&base, &mut t, &cfg).unwrap();
        let events: Vec<usize> = run.records.iter().map(|r| r.rollback_events).collect();
        let last = &run.records[0];
        assert!(width(&run.checkpoint, 8) >= narrow);
        assert!(last.accepted_grid_index.unwrap() > 0, "{:?}", last.tried);
        assert_eq!(events.iter().sum::<usize>(), events[1]);
        assert!(events[1] >= 1);
        assert!(run.records[1].accepted.is_some());
        assert!(run.retrain_calls <= retrain_budget(3, &cfg));
    }

    #[test]
    fn gate_uses_epsilon() {
        let cfg = RunConfig {
            acceptance_epsilon: 0.05,
            ..RunConfig::default()
        };
        let mut t = Scripted {
            accuracy: |_: &Checkpoint, _: &RetrainJob| 0.86,
            jobs: Vec::new(),
        };
        let run = auto_prune(&baseline(), &mut t, &cfg).unwrap();
        assert!(run.records.iter().all(|r| r.accepted_alpha() == Some(0.3)));
    }
}
