use crate::error::Result;
use crate::model::checkpoint::{expected_tensors, Checkpoint};
use crate::model::graph::{Activation, LayerKind, ModelGraph};

/// Output channels summed over every conv except shortcut projections.
pub fn count_filters(graph: &ModelGraph) -> usize {
    let projections = graph.projection_convs();
    graph
        .conv_indices()
        .into_iter()
        .filter(|i| !projections.contains(i))
        .map(|i| graph.layers[i].out_channels)
        .sum()
}

/// Element count of every stored tensor, batch-norm running statistics
/// included.
pub fn count_params(ckpt: &Checkpoint) -> usize {
    ckpt.tensors.values().map(|t| t.numel()).sum()
}

/// [`count_params`] for the tensors a graph implies, without materializing them.
pub fn count_graph_params(graph: &ModelGraph) -> usize {
    expected_tensors(graph)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum()
}

/// `2 * MACs` of every conv and linear layer for one eval-mode image.
pub fn count_flops(graph: &ModelGraph) -> Result<u64> {
    let trace = graph.validate()?;
    let mut flops = 0u64;
    for (i, l) in graph.layers.iter().enumerate() {
        flops += match (l.kind, trace.output[i]) {
            (LayerKind::Conv, Activation::Map { c, h, w }) => {
                2 * (c * l.in_channels * l.kernel * l.kernel * h * w) as u64
            }
            (LayerKind::Linear, _) => 2 * (l.in_channels * l.out_channels) as u64,
            _ => 0,
        };
    }
    Ok(flops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::graph::LayerSpec;
    use crate::model::{build, init_params, Arch};

    #[test]
    fn single_pixel_conv() {
        let g = ModelGraph {
            arch: "unit".into(),
            layers: vec![
                LayerSpec::conv(1, 1, 1, 1, 0, false),
                LayerSpec::gap(1),
                LayerSpec::linear(1, 2),
            ],
            blocks: Vec::new(),
            num_classes: 2,
            input_shape: [1, 1, 1],
        };
        // conv: 1 weight, 2 FLOPs; linear: 2 weights + 2 biases, 4 FLOPs
        assert_eq!(count_graph_params(&g), 1 + 4);
        assert_eq!(count_flops(&g).unwrap(), 2 + 4);
        assert_eq!(count_params(&init_params(&g, 0).unwrap()), 5);
    }

    #[test]
    fn graph_and_checkpoint_param_counts_agree() {
        let g = build(Arch::Resnet20, 10, [3, 32, 32]).unwrap();
        assert_eq!(
            count_graph_params(&g),
            count_params(&init_params(&g, 0).unwrap())
        );
    }

    #[test]
    fn vgg16_flops_follow_the_mac_convention() {
        let g = build(Arch::Vgg16, 10, [3, 32, 32]).unwrap();
        let flops = count_flops(&g).unwrap();
        assert!((6.2e8..6.4e8).contains(&(flops as f64)), "{flops}");
    }
}
