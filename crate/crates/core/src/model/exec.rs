//! Runs a checkpoint's graph forward and backward.

use crate::error::{Error, Result};
use crate::model::checkpoint::{
    beta_name, bias_name, gamma_name, running_mean_name, running_var_name, weight_name, Checkpoint,
};
use crate::model::graph::{LayerKind, ModelGraph, Shortcut, Step};
use crate::ops::{
    BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2x2, Mode, Relu, RunningUpdate,
};
use crate::optim::TensorMap;

type Params<T> = std::collections::BTreeMap<String, Tensor<T>>;
use crate::tensor::{Scalar, Tensor};

/// Batch-norm running statistics keyed by layer index.
pub type RunningUpdates<T> = Vec<(usize, RunningUpdate<T>)>;

enum LayerState<T> {
    Conv(Conv2d<T>),
    Bn(BatchNorm2d<T>),
    Relu(Relu),
    Pool(MaxPool2x2),
    Gap(GlobalAvgPool),
    Linear(Linear<T>),
}

/// Per-layer caches for one forward/backward pass over a fixed graph.
pub struct Network<'g, T = f32> {
    graph: &'g ModelGraph,
    states: Vec<LayerState<T>>,
}

fn param<'t, T>(params: &'t Params<T>, name: &str) -> Result<&'t Tensor<T>> {
    params
        .get(name)
        .ok_or_else(|| Error::Invariant(format!("missing tensor {name}")))
}

impl<'g, T: Scalar> Network<'g, T> {
    pub fn new(graph: &'g ModelGraph) -> Self {
        let states = graph
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Conv => LayerState::Conv(Conv2d::new(l.stride, l.pad)),
                LayerKind::Batchnorm => LayerState::Bn(BatchNorm2d::new()),
                LayerKind::Relu => LayerState::Relu(Relu::new()),
                LayerKind::Maxpool => LayerState::Pool(MaxPool2x2::new()),
                LayerKind::Gap => LayerState::Gap(GlobalAvgPool::new()),
                LayerKind::Linear => LayerState::Linear(Linear::new()),
            })
            .collect();
        Self { graph, states }
    }

    fn layer_forward(
        &mut self,
        i: usize,
        params: &Params<T>,
        x: &Tensor<T>,
        mode: Mode,
        updates: &mut RunningUpdates<T>,
    ) -> Result<Tensor<T>> {
        let spec = &self.graph.layers[i];
        match &mut self.states[i] {
            LayerState::Conv(conv) => {
                let bias = if spec.bias {
                    Some(param(params, &bias_name(i))?)
                } else {
                    None
                };
                conv.forward(x, param(params, &weight_name(i))?, bias)
            }
            LayerState::Bn(bn) => {
                let (y, update) = bn.forward(
                    x,
                    param(params, &gamma_name(i))?,
                    param(params, &beta_name(i))?,
                    param(params, &running_mean_name(i))?,
                    param(params, &running_var_name(i))?,
                    mode,
                )?;
                updates.extend(update.map(|u| (i, u)));
                Ok(y)
            }
            LayerState::Relu(r) => Ok(r.forward(x)),
            LayerState::Pool(p) => p.forward(x),
            LayerState::Gap(g) => g.forward(x),
            LayerState::Linear(l) => l.forward(
                x,
                param(params, &weight_name(i))?,
                param(params, &bias_name(i))?,
            ),
        }
    }

    fn layer_backward(
        &self,
        i: usize,
        grad: &Tensor<T>,
        grads: &mut Params<T>,
    ) -> Result<Tensor<T>> {
        match &self.states[i] {
            LayerState::Conv(conv) => {
                let g = conv.backward(grad)?;
                grads.insert(weight_name(i), g.weight);
                if let Some(b) = g.bias {
                    grads.insert(bias_name(i), b);
                }
                Ok(g.input)
            }
            LayerState::Bn(bn) => {
                let g = bn.backward(grad)?;
                grads.insert(gamma_name(i), g.gamma);
                grads.insert(beta_name(i), g.beta);
                Ok(g.input)
            }
            LayerState::Relu(r) => r.backward(grad),
            LayerState::Pool(p) => p.backward(grad),
            LayerState::Gap(g) => g.backward(grad),
            LayerState::Linear(l) => {
                let g = l.backward(grad)?;
                grads.insert(weight_name(i), g.weight);
                grads.insert(bias_name(i), g.bias);
                Ok(g.input)
            }
        }
    }

    /// Returns logits and, in train mode, the new running statistics of every
    /// batch-norm layer (not yet applied to `params`).
    pub fn forward(
        &mut self,
        params: &Params<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, RunningUpdates<T>)> {
        let [c, h, w] = self.graph.input_shape;
        let [_, ic, ih, iw] = input.dims4("network input")?;
        if [ic, ih, iw] != [c, h, w] {
            return Err(Error::dim(
                "network input",
                format!("[_, {c}, {h}, {w}]"),
                format!("{:?}", input.shape()),
            ));
        }
        let mut updates = Vec::new();
        let mut x = input.clone();
        for step in self.graph.plan() {
            match step {
                Step::Layer(i) => x = self.layer_forward(i, params, &x, mode, &mut updates)?,
                Step::Block(b) => {
                    let block = &self.graph.blocks[b];
                    let (main, shortcut) = (block.main.clone(), block.shortcut);
                    let mut y = x.clone();
                    for i in main {
                        y = self.layer_forward(i, params, &y, mode, &mut updates)?;
                    }
                    let skip = match shortcut {
                        Shortcut::Identity => x,
                        Shortcut::Projection { conv, bn } => {
                            let s = self.layer_forward(conv, params, &x, mode, &mut updates)?;
                            self.layer_forward(bn, params, &s, mode, &mut updates)?
                        }
                    };
                    x = y.add(&skip)?;
                }
            }
        }
        Ok((x, updates))
    }

    /// Gradients of every trainable tensor given the loss gradient w.r.t.
    /// the logits of the preceding [`Network::forward`].
    pub fn backward(&self, grad_logits: &Tensor<T>) -> Result<Params<T>> {
        let mut grads = Params::new();
        let mut g = grad_logits.clone();
        for step in self.graph.plan().into_iter().rev() {
            match step {
                Step::Layer(i) => g = self.layer_backward(i, &g, &mut grads)?,
                Step::Block(b) => {
                    let block = &self.graph.blocks[b];
                    let mut gm = g.clone();
                    for &i in block.main.iter().rev() {
                        gm = self.layer_backward(i, &gm, &mut grads)?;
                    }
                    let gs = match block.shortcut {
                        Shortcut::Identity => g,
                        Shortcut::Projection { conv, bn } => {
                            let s = self.layer_backward(bn, &g, &mut grads)?;
                            self.layer_backward(conv, &s, &mut grads)?
                        }
                    };
                    g = gm.add(&gs)?;
                }
            }
        }
        Ok(grads)
    }
}

/// Eval-mode logits `[B, num_classes]`.
pub fn forward(ckpt: &Checkpoint, batch: &Tensor) -> Result<Tensor> {
    let mut net = Network::new(&ckpt.graph);
    Ok(net.forward(&ckpt.tensors, batch, Mode::Eval)?.0)
}

/// Writes running-statistic updates returned by a train-mode forward.
pub fn apply_running_updates(params: &mut TensorMap, updates: RunningUpdates<f32>) {
    for (i, u) in updates {
        params.insert(running_mean_name(i), u.mean);
        params.insert(running_var_name(i), u.var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checkpoint::init_params;
    use crate::model::zoo::{build, Arch};
    use crate::ops::softmax_cross_entropy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn logits_have_class_width() {
        for (arch, classes) in [(Arch::ToyCnn, 5), (Arch::Resnet20, 10)] {
            let g = build(arch, classes, [3, 16, 16]).unwrap();
            let ckpt = init_params(&g, 1).unwrap();
            let y = forward(&ckpt, &batch([2, 3, 16, 16], 2)).unwrap();
            assert_eq!(y.shape(), &[2, classes]);
        }
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let g = build(Arch::ToyCnn, 4, [3, 16, 16]).unwrap();
        let ckpt = init_params(&g, 1).unwrap();
        assert!(matches!(
            forward(&ckpt, &batch([1, 3, 8, 8], 0)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn fresh_net_loss_is_near_ln_classes() {
        let g = build(Arch::ToyCnn, 10, [3, 16, 16]).unwrap();
        let ckpt = init_params(&g, 3).unwrap();
        let x = batch([64, 3, 16, 16], 4);
        let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
        let (loss, _) = softmax_cross_entropy(&forward(&ckpt, &x).unwrap(), &labels).unwrap();
        let target = 10f32.ln();
        assert!((loss / target - 1.0).abs() < 0.1, "loss {loss}");
    }

    #[test]
    fn backward_covers_every_trainable_tensor() {
        let g = build(Arch::Resnet20, 4, [3, 8, 8]).unwrap();
        let ckpt = init_params(&g, 5).unwrap();
        let mut net = Network::new(&g);
        let (logits, updates) = net
            .forward(&ckpt.tensors, &batch([3, 3, 8, 8], 6), Mode::Train)
            .unwrap();
        let bn_layers = g
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::Batchnorm)
            .count();
        assert_eq!(updates.len(), bn_layers);
        let (_, dl) = softmax_cross_entropy(&logits, &[0, 1, 2]).unwrap();
        let grads = net.backward(&dl).unwrap();
        for (name, t) in &ckpt.tensors {
            if crate::model::checkpoint::is_trainable(name) {
                assert_eq!(grads[name].shape(), t.shape(), "{name}");
            } else {
                assert!(!grads.contains_key(name));
            }
        }
    }

    // Whole-network directional derivative in f64 against a central
    // difference, covering batch-norm in train mode and both shortcut kinds.
    #[test]
    fn network_gradient_matches_directional_difference() {
        for arch in [Arch::ToyCnn, Arch::Resnet20] {
            let g = build(arch, 3, [3, 8, 8]).unwrap();
            let ckpt = init_params(&g, 9).unwrap();
            let params: Params<f64> = ckpt
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect();
            let x = batch([4, 3, 8, 8], 10).cast::<f64>();
            let labels = [0, 1, 2, 1];
            let loss_at = |params: &Params<f64>| {
                let (y, _) = Network::new(&g).forward(params, &x, Mode::Train).unwrap();
                softmax_cross_entropy(&y, &labels).unwrap().0
            };
            let mut net = Network::new(&g);
            let (y, _) = net.forward(&params, &x, Mode::Train).unwrap();
            let grads = net
                .backward(&softmax_cross_entropy(&y, &labels).unwrap().1)
                .unwrap();
            for (seed, name) in grads.keys().enumerate() {
                let dir = batch([1, 1, 1, grads[name].numel()], seed as u64).cast::<f64>();
                let analytic: f64 = grads[name]
                    .data()
                    .iter()
                    .zip(dir.data())
                    .map(|(a, d)| a * d)
                    .sum();
                let h = 1e-6;
                let shifted = |sign: f64| {
                    let mut p = params.clone();
                    let t = p.get_mut(name).unwrap();
                    for (v, &d) in t.data_mut().iter_mut().zip(dir.data()) {
                        *v += sign * h * d;
                    }
                    loss_at(&p)
                };
                let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-5,
                    "{arch} {name}: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }
}
