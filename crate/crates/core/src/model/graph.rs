//! Layer-level architecture description and the channel-consistency
//! validator shared by builders, the checkpoint loader and the pruner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv_out_len;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Batchnorm,
    Relu,
    Maxpool,
    Gap,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub prunable: bool,
    #[serde(default)]
    pub bias: bool,
}

impl LayerSpec {
    pub fn conv(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        prunable: bool,
    ) -> Self {
        Self {
            kind: LayerKind::Conv,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            pad,
            prunable,
            bias: false,
        }
    }

    fn passthrough(kind: LayerKind, channels: usize) -> Self {
        let (kernel, stride) = if kind == LayerKind::Maxpool {
            (2, 2)
        } else {
            (0, 0)
        };
        Self {
            kind,
            in_channels: channels,
            out_channels: channels,
            kernel,
            stride,
            pad: 0,
            prunable: false,
            bias: false,
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        Self::passthrough(LayerKind::Batchnorm, channels)
    }

    pub fn relu(channels: usize) -> Self {
        Self::passthrough(LayerKind::Relu, channels)
    }

    pub fn maxpool(channels: usize) -> Self {
        Self::passthrough(LayerKind::Maxpool, channels)
    }

    pub fn gap(channels: usize) -> Self {
        Self::passthrough(LayerKind::Gap, channels)
    }

    pub fn linear(fin: usize, fout: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            in_channels: fin,
            out_channels: fout,
            kernel: 0,
            stride: 0,
            pad: 0,
            prunable: false,
            bias: true,
        }
    }

    pub fn is_conv(&self) -> bool {
        self.kind == LayerKind::Conv
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shortcut {
    Identity,
    /// 1x1 convolution plus batch norm on the skip path.
    Projection {
        conv: usize,
        bn: usize,
    },
}

/// A residual unit: `relu`-free sum of the main path and the shortcut. The
/// activation after the sum is an ordinary layer following the block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub main: Vec<usize>,
    pub shortcut: Shortcut,
}

impl ResidualBlock {
    pub fn start(&self) -> usize {
        self.main[0]
    }

    /// One past the last layer index owned by the block.
    pub fn end(&self) -> usize {
        let last_main = *self.main.last().expect("non-empty main path");
        match self.shortcut {
            Shortcut::Identity => last_main + 1,
            Shortcut::Projection { conv, bn } => last_main.max(conv).max(bn) + 1,
        }
    }

    pub fn projection_layers(&self) -> Vec<usize> {
        match self.shortcut {
            Shortcut::Identity => Vec::new(),
            Shortcut::Projection { conv, bn } => vec![conv, bn],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub arch: String,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub blocks: Vec<ResidualBlock>,
    pub num_classes: usize,
    /// `(channels, height, width)`
    pub input_shape: [usize; 3],
}

/// Execution order: plain layers and whole residual blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Layer(usize),
    Block(usize),
}

/// Activation shape flowing between layers: `(channels, height, width)`, or
/// flat features after global pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

/// Per-layer input and output activation shapes for a validated graph.
#[derive(Debug, Clone)]
pub struct ShapeTrace {
    pub input: Vec<Activation>,
    pub output: Vec<Activation>,
}

impl ModelGraph {
    pub fn conv_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_conv())
            .collect()
    }

    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].prunable)
            .collect()
    }

    /// Convs on a shortcut path.
    pub fn projection_convs(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter_map(|b| match b.shortcut {
                Shortcut::Projection { conv, .. } => Some(conv),
                Shortcut::Identity => None,
            })
            .collect()
    }

    pub fn block_of(&self, layer: usize) -> Option<usize> {
        self.blocks
            .iter()
            .position(|b| (b.start()..b.end()).contains(&layer))
    }

    pub fn plan(&self) -> Vec<Step> {
        let mut steps = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            match self.blocks.iter().position(|b| b.start() == i) {
                Some(b) => {
                    steps.push(Step::Block(b));
                    i = self.blocks[b].end();
                }
                None => {
                    steps.push(Step::Layer(i));
                    i += 1;
                }
            }
        }
        steps
    }

    fn check_structure(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invariant(format!("graph {}: {msg}", self.arch)));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.prunable && !l.is_conv() {
                return bad(format!("layer {i} is prunable but not a conv"));
            }
            if l.is_conv()
                && (l.kernel == 0 || l.stride == 0 || l.in_channels == 0 || l.out_channels == 0)
            {
                return bad(format!(
                    "conv layer {i} has a zero kernel, stride or channel count"
                ));
            }
            if !l.is_conv() && l.kind != LayerKind::Linear && l.in_channels != l.out_channels {
                return bad(format!("layer {i} ({:?}) changes channel count", l.kind));
            }
        }
        let mut owner = vec![None; self.layers.len()];
        for (b, block) in self.blocks.iter().enumerate() {
            if block.main.is_empty() {
                return bad(format!("block {b} has an empty main path"));
            }
            let mut owned = block.main.clone();
            owned.extend(block.projection_layers());
            let mut sorted = owned.clone();
            sorted.sort_unstable();
            let contiguous = sorted.windows(2).all(|w| w[1] == w[0] + 1);
            if sorted != owned || !contiguous || *sorted.last().unwrap() >= self.layers.len() {
                return bad(format!(
                    "block {b} layers {owned:?} are not a contiguous ordered range"
                ));
            }
            for &i in &owned {
                if owner[i].replace(b).is_some() {
                    return bad(format!("layer {i} belongs to more than one block"));
                }
            }
            let convs: Vec<usize> = block
                .main
                .iter()
                .copied()
                .filter(|&i| self.layers[i].is_conv())
                .collect();
            if let Some(&late) = convs.iter().skip(1).find(|&&i| self.layers[i].prunable) {
                return bad(format!(
                    "block {b}: only the first conv may be prunable, layer {late} is marked"
                ));
            }
            if let Shortcut::Projection { conv, bn } = block.shortcut {
                if !self.layers[conv].is_conv() || self.layers[bn].kind != LayerKind::Batchnorm {
                    return bad(format!("block {b}: projection must be conv + batchnorm"));
                }
                if self.layers[conv].prunable {
                    return bad(format!(
                        "block {b}: projection conv {conv} may not be prunable"
                    ));
                }
            }
        }
        Ok(())
    }

    fn apply(&self, i: usize, act: Activation) -> Result<Activation> {
        let l = &self.layers[i];
        let mismatch = |expected: String| {
            Err(Error::dim(
                "graph",
                format!("layer {i} ({:?}) input {expected}", l.kind),
                format!("{act:?}"),
            ))
        };
        match (l.kind, act) {
            (LayerKind::Linear, Activation::Flat(n)) => {
                if n != l.in_channels {
                    return mismatch(format!("{} features", l.in_channels));
                }
                Ok(Activation::Flat(l.out_channels))
            }
            (LayerKind::Linear, _) => mismatch("flat features (global pooling first)".into()),
            (_, Activation::Flat(_)) => mismatch("a feature map".into()),
            (kind, Activation::Map { c, h, w }) => {
                if c != l.in_channels {
                    return mismatch(format!("{} channels", l.in_channels));
                }
                match kind {
                    LayerKind::Conv => {
                        match (
                            conv_out_len(h, l.kernel, l.stride, l.pad),
                            conv_out_len(w, l.kernel, l.stride, l.pad),
                        ) {
                            (Some(oh), Some(ow)) => Ok(Activation::Map {
                                c: l.out_channels,
                                h: oh,
                                w: ow,
                            }),
                            _ => mismatch("spatial size large enough for the kernel".into()),
                        }
                    }
                    LayerKind::Batchnorm | LayerKind::Relu => Ok(act),
                    LayerKind::Maxpool => {
                        if h < 2 || w < 2 {
                            return mismatch("spatial size >= 2".into());
                        }
                        Ok(Activation::Map {
                            c,
                            h: h / 2,
                            w: w / 2,
                        })
                    }
                    LayerKind::Gap => Ok(Activation::Flat(c)),
                    LayerKind::Linear => unreachable!(),
                }
            }
        }
    }

    /// Checks structure and channel flow, returning per-layer shapes.
    pub fn validate(&self) -> Result<ShapeTrace> {
        self.check_structure()?;
        let n = self.layers.len();
        let mut input = vec![Activation::Flat(0); n];
        let mut output = vec![Activation::Flat(0); n];
        let [c, h, w] = self.input_shape;
        let mut act = Activation::Map { c, h, w };
        for step in self.plan() {
            match step {
                Step::Layer(i) => {
                    input[i] = act;
                    act = self.apply(i, act)?;
                    output[i] = act;
                }
                Step::Block(b) => {
                    let block = &self.blocks[b];
                    let block_in = act;
                    let mut main = act;
                    for &i in &block.main {
                        input[i] = main;
                        main = self.apply(i, main)?;
                        output[i] = main;
                    }
                    let skip = match block.shortcut {
                        Shortcut::Identity => block_in,
                        Shortcut::Projection { conv, bn } => {
                            input[conv] = block_in;
                            output[conv] = self.apply(conv, block_in)?;
                            input[bn] = output[conv];
                            output[bn] = self.apply(bn, output[conv])?;
                            output[bn]
                        }
                    };
                    if skip != main {
                        return Err(Error::dim(
                            "graph",
                            format!("block {b} shortcut output {main:?}"),
                            format!("{skip:?}"),
                        ));
                    }
                    act = main;
                }
            }
        }
        match act {
            Activation::Flat(k) if k == self.num_classes => Ok(ShapeTrace { input, output }),
            other => Err(Error::dim(
                "graph",
                format!("final output of {} class scores", self.num_classes),
                format!("{other:?}"),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelGraph {
        ModelGraph {
            arch: "tiny".into(),
            layers: vec![
                LayerSpec::conv(1, 4, 3, 1, 1, true),
                LayerSpec::batchnorm(4),
                LayerSpec::relu(4),
                LayerSpec::gap(4),
                LayerSpec::linear(4, 2),
            ],
            blocks: vec![],
            num_classes: 2,
            input_shape: [1, 4, 4],
        }
    }

    #[test]
    fn valid_graph_traces_shapes() {
        let trace = tiny().validate().unwrap();
        assert_eq!(trace.output[0], Activation::Map { c: 4, h: 4, w: 4 });
        assert_eq!(trace.output[4], Activation::Flat(2));
    }

    #[test]
    fn channel_break_is_detected() {
        let mut g = tiny();
        g.layers[1] = LayerSpec::batchnorm(3);
        assert!(g.validate().is_err());
    }

    #[test]
    fn prunable_flag_only_on_convs() {
        let mut g = tiny();
        g.layers[2].prunable = true;
        assert!(matches!(g.validate(), Err(Error::Invariant(_))));
    }
}
