//! SGD training, evaluation and the retraining step used by the pruning
//! search.

use serde::{Deserialize, Serialize};

use crate::config::{GateSplit, RunConfig};
use crate::data::{shuffled_batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::checkpoint::{derive_rng, init_params, is_trainable, Checkpoint, CheckpointMeta};
use crate::model::exec::{apply_running_updates, Network};
use crate::model::graph::ModelGraph;
use crate::ops::{softmax_cross_entropy, Mode};
use crate::optim::{sgd_step, SgdState, TensorMap};
use crate::stats::{snapshot_distributions, LayerSnapshot};

const SHUFFLE: u64 = 0x5348_5546;
const BASELINE_STREAM: u64 = 0;
const RETRAIN_STREAM: u64 = 1;
const FINETUNE_STREAM: u64 = 2;

/// Accuracy after `epoch` training epochs (0 is the untrained input).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub accuracy: f64,
}

/// Fraction of `split` classified correctly in eval mode.
pub fn evaluate(
    ckpt: &Checkpoint,
    split: &Split,
    shape: [usize; 3],
    batch_size: usize,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty split".into()));
    }
    let mut net = Network::new(&ckpt.graph);
    let indices: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = split.batch(chunk, shape);
        let (logits, _) = net.forward(&ckpt.tensors, &x, Mode::Eval)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&labels) {
            // first maximum wins ties
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += usize::from(pred == label);
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

fn gate_split<'d>(data: &'d Dataset, cfg: &RunConfig) -> &'d Split {
    match cfg.gate_split {
        GateSplit::Train => &data.train,
        GateSplit::Eval => &data.eval,
    }
}

fn check_compatible(graph: &ModelGraph, data: &Dataset) -> Result<()> {
    if graph.input_shape != data.input_shape || graph.num_classes != data.num_classes {
        return Err(Error::Input(format!(
            "model expects input {:?} and {} classes, dataset {} has {:?} and {}",
            graph.input_shape, graph.num_classes, data.id, data.input_shape, data.num_classes
        )));
    }
    Ok(())
}

fn to_divergence(e: Error) -> Error {
    match e {
        Error::NonFinite { op, detail } => Error::Divergence(format!("{op}: {detail}")),
        other => other,
    }
}

/// One pass over the training split; returns the mean batch loss.
fn train_epoch(
    graph: &ModelGraph,
    params: &mut TensorMap,
    sgd: &mut SgdState,
    data: &Dataset,
    cfg: &RunConfig,
    stream: &[u64],
) -> Result<f64> {
    let mut rng = derive_rng(cfg.seed, stream);
    let batches = shuffled_batches(data.train.len(), cfg.batch_size, &mut rng);
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, indices) in batches.iter().enumerate() {
        // batch statistics of a single image are degenerate
        if indices.len() < 2 {
            continue;
        }
        let (x, labels) = data.train.batch(indices, data.input_shape);
        let mut net = Network::new(graph);
        let (logits, updates) = net
            .forward(params, &x, Mode::Train)
            .map_err(to_divergence)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &labels).map_err(to_divergence)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("batch {b}: loss {loss}")));
        }
        let grads = net.backward(&grad).map_err(to_divergence)?;
        apply_running_updates(params, updates);
        sgd_step(params, &grads, sgd).map_err(to_divergence)?;
        total += loss as f64;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

fn new_sgd(params: &TensorMap, cfg: &RunConfig) -> Result<SgdState> {
    SgdState::new(
        params.iter().filter(|(name, _)| is_trainable(name)),
        cfg.lr as f32,
        cfg.momentum as f32,
        cfg.weight_decay as f32,
    )
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    /// Parameters at the best eval accuracy (latest epoch among ties).
    pub checkpoint: Checkpoint,
    /// Eval accuracy after every epoch, starting at the initialization.
    pub curve: Vec<CurvePoint>,
    pub snapshots: Vec<(usize, Vec<LayerSnapshot>)>,
}

/// Trains a freshly initialized `graph` for `cfg.epochs` with the step
/// schedule. `meta.baseline_accuracy` is the best eval accuracy seen, and
/// the returned parameters are the ones that reached it.
pub fn train_baseline(
    graph: &ModelGraph,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<BaselineOutcome> {
    cfg.validate()?;
    check_compatible(graph, data)?;
    let mut ckpt = init_params(graph, cfg.seed)?;
    ckpt.meta = CheckpointMeta {
        baseline_accuracy: 0.0,
        seed: cfg.seed,
        epoch: 0,
        dataset_id: data.id.clone(),
        snapshot_epochs: cfg.snapshot_epochs.clone(),
        accuracy: None,
        normalization: Some(data.normalization.clone()),
    };
    let mut snapshots = Vec::new();
    let mut snapshot = |epoch: usize, ckpt: &Checkpoint| -> Result<()> {
        if cfg.snapshot_epochs.contains(&epoch) {
            snapshots.push((epoch, snapshot_distributions(ckpt)?));
        }
        Ok(())
    };

    let acc0 = evaluate(&ckpt, &data.eval, data.input_shape, cfg.eval_batch_size)?;
    snapshot(0, &ckpt)?;
    let mut curve = vec![CurvePoint {
        epoch: 0,
        accuracy: acc0,
    }];
    let mut best = (acc0, 0, ckpt.tensors.clone());
    let mut sgd = new_sgd(&ckpt.tensors, cfg)?;
    for epoch in 0..cfg.epochs {
        sgd.learning_rate = cfg.lr_at(epoch, cfg.epochs) as f32;
        let loss = train_epoch(
            graph,
            &mut ckpt.tensors,
            &mut sgd,
            data,
            cfg,
            &[SHUFFLE, BASELINE_STREAM, epoch as u64],
        )?;
        let acc = evaluate(&ckpt, &data.eval, data.input_shape, cfg.eval_batch_size)?;
        log::info!("epoch {}: loss {loss:.4} eval accuracy {acc:.4}", epoch + 1);
        curve.push(CurvePoint {
            epoch: epoch + 1,
            accuracy: acc,
        });
        snapshot(epoch + 1, &ckpt)?;
        // ties go to the later, longer-trained weights
        if acc >= best.0 {
            best = (acc, epoch + 1, ckpt.tensors.clone());
        }
    }
    ckpt.tensors = best.2;
    ckpt.meta.baseline_accuracy = best.0;
    ckpt.meta.accuracy = Some(best.0);
    ckpt.meta.epoch = best.1;
    Ok(BaselineOutcome {
        checkpoint: ckpt,
        curve,
        snapshots,
    })
}

/// One retraining request from the pruning search.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrainJob {
    pub layer: usize,
    pub alpha: f64,
    pub grid_index: usize,
    /// Accuracy at which retraining stops early.
    pub target: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone)]
pub struct RetrainOutcome {
    /// Best-accuracy parameters (the input itself if no epoch improved on it).
    pub checkpoint: Checkpoint,
    pub best_accuracy: f64,
    /// `[epoch 0]` alone when the input already meets the target, otherwise
    /// one point per trained epoch.
    pub curve: Vec<CurvePoint>,
    pub diverged: bool,
}

/// What the pruning search needs from a training backend.
pub trait Trainer {
    /// Accuracy on the split the recovery gate uses.
    fn evaluate(&mut self, ckpt: &Checkpoint) -> Result<f64>;
    fn retrain(&mut self, ckpt: &Checkpoint, job: &RetrainJob) -> Result<RetrainOutcome>;
}

/// Real training on a dataset.
pub struct SgdTrainer<'a> {
    pub data: &'a Dataset,
    pub cfg: &'a RunConfig,
}

impl<'a> SgdTrainer<'a> {
    pub fn new(data: &'a Dataset, cfg: &'a RunConfig) -> Self {
        Self { data, cfg }
    }

    fn gate_accuracy(&self, ckpt: &Checkpoint) -> Result<f64> {
        evaluate(
            ckpt,
            gate_split(self.data, self.cfg),
            self.data.input_shape,
            self.cfg.eval_batch_size,
        )
    }
}

impl Trainer for SgdTrainer<'_> {
    fn evaluate(&mut self, ckpt: &Checkpoint) -> Result<f64> {
        check_compatible(&ckpt.graph, self.data)?;
        self.gate_accuracy(ckpt)
    }

    fn retrain(&mut self, ckpt: &Checkpoint, job: &RetrainJob) -> Result<RetrainOutcome> {
        retrain(ckpt, self.data, self.cfg, job)
    }
}

/// Trains `ckpt` for up to `job.epochs`, stopping as soon as the gate split
/// accuracy reaches `job.target`. Divergence is reported, not raised.
pub fn retrain(
    ckpt: &Checkpoint,
    data: &Dataset,
    cfg: &RunConfig,
    job: &RetrainJob,
) -> Result<RetrainOutcome> {
    check_compatible(&ckpt.graph, data)?;
    let split = gate_split(data, cfg);
    let acc0 = evaluate(ckpt, split, data.input_shape, cfg.eval_batch_size)?;
    if acc0 >= job.target {
        return Ok(RetrainOutcome {
            checkpoint: ckpt.clone(),
            best_accuracy: acc0,
            curve: vec![CurvePoint {
                epoch: 0,
                accuracy: acc0,
            }],
            diverged: false,
        });
    }
    let mut params = ckpt.tensors.clone();
    let mut sgd = new_sgd(&params, cfg)?;
    let mut best = (acc0, ckpt.tensors.clone());
    let mut curve = Vec::new();
    let mut diverged = false;
    for epoch in 0..job.epochs {
        sgd.learning_rate = cfg.lr_at(epoch, job.epochs) as f32;
        let stream = [
            SHUFFLE,
            RETRAIN_STREAM,
            job.layer as u64,
            job.grid_index as u64,
            epoch as u64,
        ];
        match train_epoch(&ckpt.graph, &mut params, &mut sgd, data, cfg, &stream) {
            Ok(_) => {}
            Err(Error::Divergence(msg)) => {
                log::warn!(
                    "layer {} alpha {}: retraining diverged ({msg})",
                    job.layer,
                    job.alpha
                );
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        }
        let mut probe = ckpt.clone();
        probe.tensors = params.clone();
        let acc = evaluate(&probe, split, data.input_shape, cfg.eval_batch_size)?;
        curve.push(CurvePoint {
            epoch: epoch + 1,
            accuracy: acc,
        });
        if acc > best.0 {
            best = (acc, params.clone());
        }
        if acc >= job.target {
            break;
        }
    }
    let mut out = ckpt.clone();
    out.tensors = best.1;
    out.meta.accuracy = Some(best.0);
    Ok(RetrainOutcome {
        checkpoint: out,
        best_accuracy: if diverged { 0.0 } else { best.0 },
        curve,
        diverged,
    })
}

/// Optional extra training after pruning. Returns the best of the input and
/// every trained epoch on the gate split, so the reported accuracy never
/// drops below the input's.
pub fn fine_tune(
    ckpt: &Checkpoint,
    data: &Dataset,
    cfg: &RunConfig,
) -> Result<(Checkpoint, Vec<CurvePoint>)> {
    cfg.validate()?;
    check_compatible(&ckpt.graph, data)?;
    let split = gate_split(data, cfg);
    let epochs = cfg.finetune_epochs();
    let acc0 = evaluate(ckpt, split, data.input_shape, cfg.eval_batch_size)?;
    let mut curve = vec![CurvePoint {
        epoch: 0,
        accuracy: acc0,
    }];
    let mut best = (acc0, ckpt.tensors.clone());
    let mut params = ckpt.tensors.clone();
    let mut sgd = new_sgd(&params, cfg)?;
    for epoch in 0..epochs {
        sgd.learning_rate = cfg.lr_at(epoch, epochs) as f32;
        let stream = [SHUFFLE, FINETUNE_STREAM, epoch as u64];
        match train_epoch(&ckpt.graph, &mut params, &mut sgd, data, cfg, &stream) {
            Ok(_) => {}
            Err(Error::Divergence(msg)) => {
                log::warn!(
                    "fine-tuning diverged at epoch {} ({msg}); keeping the best weights so far",
                    epoch + 1
                );
                break;
            }
            Err(e) => return Err(e),
        }
        let mut probe = ckpt.clone();
        probe.tensors = params.clone();
        let acc = evaluate(&probe, split, data.input_shape, cfg.eval_batch_size)?;
        curve.push(CurvePoint {
            epoch: epoch + 1,
            accuracy: acc,
        });
        if acc > best.0 {
            best = (acc, params.clone());
        }
    }
    let mut out = ckpt.clone();
    out.tensors = best.1;
    out.meta.accuracy = Some(best.0);
    Ok((out, curve))
}
