use crate::error::{Error, Result};
use crate::model::checkpoint::{
    beta_name, bias_name, derive_rng, gamma_name, he_normal, running_mean_name, running_var_name,
    weight_name, Checkpoint, REINIT_SALT,
};
use crate::model::graph::LayerKind;
use crate::tensor::Tensor;

use super::PruneDecision;

fn slice(ckpt: &mut Checkpoint, name: String, axis: usize, keep: &[usize]) -> Result<()> {
    let t = ckpt.tensor(&name)?.select(axis, keep)?;
    ckpt.tensors.insert(name, t);
    Ok(())
}

/// Removes the filters of conv `layer` outside `decision.keep`, together with
/// the matching batch-norm channels and the consumer's input channels.
///
/// The consumer is the next conv on the same path, or the classifier after
/// global pooling (one column per channel). Kept weights are copied
/// unchanged.
pub fn prune_conv_pair(
    ckpt: &Checkpoint,
    layer: usize,
    decision: &PruneDecision,
) -> Result<Checkpoint> {
    let graph = &ckpt.graph;
    let spec = graph
        .layers
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} does not exist")))?;
    if !spec.is_conv() || !spec.prunable {
        return Err(Error::Policy(format!(
            "layer {layer} is not a prunable conv"
        )));
    }
    if decision.layer != layer {
        return Err(Error::Input(format!(
            "decision for layer {} applied to layer {layer}",
            decision.layer
        )));
    }
    let keep = &decision.keep;
    if keep.is_empty() {
        return Err(Error::Invariant(format!("layer {layer}: empty keep set")));
    }
    if !keep.windows(2).all(|w| w[0] < w[1]) || keep[keep.len() - 1] >= spec.out_channels {
        return Err(Error::Invariant(format!(
            "layer {layer}: keep set must be ascending indices below {}",
            spec.out_channels
        )));
    }
    if keep.len() == spec.out_channels {
        return Ok(ckpt.clone());
    }

    let block = graph.block_of(layer);
    let on_path = |i: usize| match block {
        Some(b) => graph.blocks[b].main.contains(&i),
        None => graph.block_of(i).is_none(),
    };

    let mut out = ckpt.clone();
    let kept = keep.len();
    slice(&mut out, weight_name(layer), 0, keep)?;
    if spec.bias {
        slice(&mut out, bias_name(layer), 0, keep)?;
    }
    out.graph.layers[layer].out_channels = kept;

    let mut i = layer + 1;
    loop {
        if i >= graph.layers.len() || !on_path(i) {
            return Err(Error::Policy(format!(
                "layer {layer}: output reaches a residual sum or the network end without a consumer"
            )));
        }
        let kind = graph.layers[i].kind;
        match kind {
            LayerKind::Batchnorm => {
                for name in [
                    gamma_name(i),
                    beta_name(i),
                    running_mean_name(i),
                    running_var_name(i),
                ] {
                    slice(&mut out, name, 0, keep)?;
                }
            }
            LayerKind::Relu | LayerKind::Maxpool | LayerKind::Gap => {}
            LayerKind::Conv | LayerKind::Linear => {
                slice(&mut out, weight_name(i), 1, keep)?;
                out.graph.layers[i].in_channels = kept;
                break;
            }
        }
        out.graph.layers[i].in_channels = kept;
        out.graph.layers[i].out_channels = kept;
        i += 1;
    }
    out.validate()?;
    Ok(out)
}

/// Redraws conv `layer`'s weights (He-normal, deterministic in `seed`) and
/// resets the batch norm that follows it. Every other tensor is unchanged.
pub fn reinit_pruned_layer(ckpt: &Checkpoint, layer: usize, seed: u64) -> Result<Checkpoint> {
    let spec = ckpt
        .graph
        .layers
        .get(layer)
        .filter(|l| l.is_conv())
        .ok_or_else(|| Error::Input(format!("layer {layer} is not a conv")))?;
    let mut rng = derive_rng(seed, &[layer as u64, REINIT_SALT, spec.out_channels as u64]);
    let shape = [
        spec.out_channels,
        spec.in_channels,
        spec.kernel,
        spec.kernel,
    ];
    let mut out = ckpt.clone();
    out.tensors
        .insert(weight_name(layer), he_normal(&shape, &mut rng));
    if spec.bias {
        out.tensors
            .insert(bias_name(layer), Tensor::zeros(&[spec.out_channels]));
    }
    let bn = layer + 1;
    if ckpt.graph.layers.get(bn).map(|l| l.kind) == Some(LayerKind::Batchnorm) {
        let c = [spec.out_channels];
        out.tensors.insert(gamma_name(bn), Tensor::full(&c, 1.0));
        out.tensors.insert(beta_name(bn), Tensor::zeros(&c));
        out.tensors.insert(running_mean_name(bn), Tensor::zeros(&c));
        out.tensors
            .insert(running_var_name(bn), Tensor::full(&c, 1.0));
    }
    Ok(out)
}
