//! Builders for the supported architectures at CIFAR scale.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::graph::{LayerSpec, ModelGraph, ResidualBlock, Shortcut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Vgg11,
    Vgg16,
    Vgg19,
    Resnet20,
    Resnet32,
    ToyCnn,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::Vgg11,
        Arch::Vgg16,
        Arch::Vgg19,
        Arch::Resnet20,
        Arch::Resnet32,
        Arch::ToyCnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Vgg11 => "vgg11",
            Arch::Vgg16 => "vgg16",
            Arch::Vgg19 => "vgg19",
            Arch::Resnet20 => "resnet20",
            Arch::Resnet32 => "resnet32",
            Arch::ToyCnn => "toy-cnn",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Arch::ALL.iter().map(|a| a.name()).collect();
                Error::Input(format!(
                    "unknown architecture {s:?} (known: {})",
                    known.join(", ")
                ))
            })
    }
}

/// Conv widths per stack; a 2x2 max pool follows each stack.
fn vgg_stacks(arch: Arch) -> &'static [&'static [usize]] {
    match arch {
        Arch::Vgg11 => &[&[64], &[128], &[256, 256], &[512, 512], &[512, 512]],
        Arch::Vgg16 => &[
            &[64, 64],
            &[128, 128],
            &[256, 256, 256],
            &[512, 512, 512],
            &[512, 512, 512],
        ],
        Arch::Vgg19 => &[
            &[64, 64],
            &[128, 128],
            &[256, 256, 256, 256],
            &[512, 512, 512, 512],
            &[512, 512, 512, 512],
        ],
        Arch::ToyCnn => &[&[8], &[16], &[32]],
        Arch::Resnet20 | Arch::Resnet32 => unreachable!("not a plain stack"),
    }
}

fn plain(arch: Arch, num_classes: usize, input_shape: [usize; 3]) -> Result<ModelGraph> {
    let stacks = vgg_stacks(arch);
    // toy-cnn pools between stacks only; VGG pools after every stack
    let pools = if arch == Arch::ToyCnn {
        stacks.len() - 1
    } else {
        stacks.len()
    };
    let divisor = 1usize << pools;
    let [c, h, w] = input_shape;
    if h % divisor != 0 || w % divisor != 0 {
        return Err(Error::Input(format!(
            "{arch} needs spatial dims divisible by {divisor}, got {h}x{w}"
        )));
    }
    let mut layers = Vec::new();
    let mut channels = c;
    for (s, stack) in stacks.iter().enumerate() {
        for &width in stack.iter() {
            layers.push(LayerSpec::conv(channels, width, 3, 1, 1, true));
            layers.push(LayerSpec::batchnorm(width));
            layers.push(LayerSpec::relu(width));
            channels = width;
        }
        if s < pools {
            layers.push(LayerSpec::maxpool(channels));
        }
    }
    layers.push(LayerSpec::gap(channels));
    layers.push(LayerSpec::linear(channels, num_classes));
    Ok(ModelGraph {
        arch: arch.name().into(),
        layers,
        blocks: Vec::new(),
        num_classes,
        input_shape,
    })
}

fn resnet(
    arch: Arch,
    depth: usize,
    num_classes: usize,
    input_shape: [usize; 3],
) -> Result<ModelGraph> {
    let per_stage = (depth - 2) / 6;
    let [c, h, w] = input_shape;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Input(format!(
            "{arch} needs spatial dims divisible by 4, got {h}x{w}"
        )));
    }
    let mut layers = vec![
        LayerSpec::conv(c, 16, 3, 1, 1, false),
        LayerSpec::batchnorm(16),
        LayerSpec::relu(16),
    ];
    let mut blocks = Vec::new();
    let mut channels = 16;
    for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
        for b in 0..per_stage {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let start = layers.len();
            layers.push(LayerSpec::conv(channels, width, 3, stride, 1, true));
            layers.push(LayerSpec::batchnorm(width));
            layers.push(LayerSpec::relu(width));
            layers.push(LayerSpec::conv(width, width, 3, 1, 1, false));
            layers.push(LayerSpec::batchnorm(width));
            let main = (start..start + 5).collect();
            let shortcut = if stride != 1 || channels != width {
                let conv = layers.len();
                layers.push(LayerSpec::conv(channels, width, 1, stride, 0, false));
                layers.push(LayerSpec::batchnorm(width));
                Shortcut::Projection { conv, bn: conv + 1 }
            } else {
                Shortcut::Identity
            };
            blocks.push(ResidualBlock { main, shortcut });
            layers.push(LayerSpec::relu(width));
            channels = width;
        }
    }
    layers.push(LayerSpec::gap(channels));
    layers.push(LayerSpec::linear(channels, num_classes));
    Ok(ModelGraph {
        arch: arch.name().into(),
        layers,
        blocks,
        num_classes,
        input_shape,
    })
}

pub fn build(arch: Arch, num_classes: usize, input_shape: [usize; 3]) -> Result<ModelGraph> {
    if num_classes < 2 {
        return Err(Error::Input(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    if input_shape.contains(&0) {
        return Err(Error::Input(format!(
            "input shape {input_shape:?} has a zero dimension"
        )));
    }
    let graph = match arch {
        Arch::Resnet20 => resnet(arch, 20, num_classes, input_shape)?,
        Arch::Resnet32 => resnet(arch, 32, num_classes, input_shape)?,
        _ => plain(arch, num_classes, input_shape)?,
    };
    graph.validate()?;
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::graph::LayerKind;

    const CIFAR: [usize; 3] = [3, 32, 32];

    fn filters(g: &ModelGraph) -> usize {
        let proj = g.projection_convs();
        g.conv_indices()
            .into_iter()
            .filter(|i| !proj.contains(i))
            .map(|i| g.layers[i].out_channels)
            .sum()
    }

    #[test]
    fn conv_layer_counts() {
        let count = |a| build(a, 10, CIFAR).unwrap().conv_indices().len();
        assert_eq!(count(Arch::Vgg11), 8);
        assert_eq!(count(Arch::Vgg16), 13);
        assert_eq!(count(Arch::Vgg19), 16);
        // 19 main-path convs plus two projections
        assert_eq!(count(Arch::Resnet20), 21);
        assert_eq!(count(Arch::ToyCnn), 3);
    }

    #[test]
    fn filter_totals() {
        assert_eq!(filters(&build(Arch::Vgg16, 10, CIFAR).unwrap()), 4224);
        assert_eq!(filters(&build(Arch::Vgg19, 10, CIFAR).unwrap()), 5504);
        assert_eq!(filters(&build(Arch::Resnet20, 10, CIFAR).unwrap()), 688);
        assert_eq!(filters(&build(Arch::Resnet32, 10, CIFAR).unwrap()), 1136);
    }

    #[test]
    fn resnet_prunes_only_first_block_conv() {
        let g = build(Arch::Resnet20, 10, CIFAR).unwrap();
        assert!(!g.layers[0].prunable);
        assert_eq!(g.prunable_indices().len(), 9);
        for b in &g.blocks {
            let convs: Vec<_> = b.main.iter().filter(|&&i| g.layers[i].is_conv()).collect();
            assert!(g.layers[*convs[0]].prunable);
            assert!(!g.layers[*convs[1]].prunable);
        }
    }

    #[test]
    fn toy_cnn_shape() {
        let g = build(Arch::ToyCnn, 10, [3, 16, 16]).unwrap();
        let widths: Vec<_> = g
            .conv_indices()
            .iter()
            .map(|&i| g.layers[i].out_channels)
            .collect();
        assert_eq!(widths, [8, 16, 32]);
        assert_eq!(g.layers.last().unwrap().kind, LayerKind::Linear);
    }

    #[test]
    fn unknown_arch_and_bad_input() {
        assert!(matches!("alexnet".parse::<Arch>(), Err(Error::Input(_))));
        assert!(build(Arch::Vgg16, 10, [3, 24, 24]).is_err());
    }
}
