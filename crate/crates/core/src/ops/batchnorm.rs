//! Per-channel batch normalization over NCHW tensors.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics after a training-mode forward.
#[derive(Debug, Clone)]
pub struct RunningUpdate<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug)]
struct BnCache<T> {
    dims: [usize; 4],
    mode: Mode,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
}

#[derive(Debug, Default)]
pub struct BatchNorm2d<T = f32> {
    cache: Option<BnCache<T>>,
}

fn check_channels<T: Scalar>(channels: usize, named: &[(&str, &Tensor<T>)]) -> Result<()> {
    for (name, t) in named {
        if t.shape() != [channels] {
            return Err(Error::dim(
                "batchnorm",
                format!("{name} of shape [{channels}]"),
                format!("{name} of shape {:?}", t.shape()),
            ));
        }
    }
    Ok(())
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    /// Normalizes `input`. In [`Mode::Train`] batch statistics are used and the
    /// updated running statistics are returned; in [`Mode::Eval`] the running
    /// statistics are used and nothing is returned.
    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Option<RunningUpdate<T>>)> {
        let dims @ [batch, channels, h, w] = input.dims4("batchnorm input")?;
        check_channels(
            channels,
            &[
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", running_mean),
                ("running_var", running_var),
            ],
        )?;
        let plane = h * w;
        let count = batch * plane;
        let eps = T::lit(BN_EPSILON);
        let x = input.data();

        let stats: Vec<(T, T)> = match mode {
            Mode::Train => (0..channels)
                .into_par_iter()
                .map(|c| {
                    let mut sum = T::zero();
                    for b in 0..batch {
                        let off = (b * channels + c) * plane;
                        for &v in &x[off..off + plane] {
                            sum += v;
                        }
                    }
                    let mean = sum / T::lit(count as f64);
                    let mut sq = T::zero();
                    for b in 0..batch {
                        let off = (b * channels + c) * plane;
                        for &v in &x[off..off + plane] {
                            let d = v - mean;
                            sq += d * d;
                        }
                    }
                    (mean, sq / T::lit(count as f64))
                })
                .collect(),
            Mode::Eval => running_mean
                .data()
                .iter()
                .zip(running_var.data())
                .map(|(&m, &v)| (m, v))
                .collect(),
        };

        let inv_std: Vec<T> = stats
            .iter()
            .map(|&(_, v)| T::one() / (v + eps).sqrt())
            .collect();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                let (mean, _) = stats[c];
                let (g, bt, is) = (gamma.data()[c], beta.data()[c], inv_std[c]);
                for i in off..off + plane {
                    let xh = (x[i] - mean) * is;
                    x_hat[i] = xh;
                    out[i] = g * xh + bt;
                }
            }
        }

        let update = (mode == Mode::Train).then(|| {
            let m = T::lit(BN_MOMENTUM);
            let keep = T::one() - m;
            // running variance tracks the unbiased estimate
            let correction = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let mean = running_mean
                .data()
                .iter()
                .zip(&stats)
                .map(|(&r, &(bm, _))| keep * r + m * bm)
                .collect();
            let var = running_var
                .data()
                .iter()
                .zip(&stats)
                .map(|(&r, &(_, bv))| keep * r + m * bv * correction)
                .collect();
            RunningUpdate {
                mean: Tensor::from_vec(vec![channels], mean).expect("running mean shape"),
                var: Tensor::from_vec(vec![channels], var).expect("running var shape"),
            }
        });

        let out = Tensor::from_vec(dims.to_vec(), out)?;
        out.ensure_finite("batchnorm_forward")?;
        self.cache = Some(BnCache {
            dims,
            mode,
            x_hat,
            inv_std,
            gamma: gamma.data().to_vec(),
        });
        Ok((out, update))
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<BatchNormGrads<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("batchnorm_backward called before forward".into()))?;
        let [batch, channels, h, w] = cache.dims;
        if grad_out.shape() != cache.dims {
            return Err(Error::dim(
                "batchnorm_backward",
                format!("{:?}", cache.dims),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let plane = h * w;
        let n = T::lit((batch * plane) as f64);
        let g = grad_out.data();
        let xh = &cache.x_hat;

        let mut sum_g = vec![T::zero(); channels];
        let mut sum_gx = vec![T::zero(); channels];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                for i in off..off + plane {
                    sum_g[c] += g[i];
                    sum_gx[c] += g[i] * xh[i];
                }
            }
        }

        let mut grad_in = vec![T::zero(); g.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * plane;
                let scale = cache.gamma[c] * cache.inv_std[c];
                match cache.mode {
                    Mode::Train => {
                        let mean_g = sum_g[c] / n;
                        let mean_gx = sum_gx[c] / n;
                        for i in off..off + plane {
                            grad_in[i] = scale * (g[i] - mean_g - xh[i] * mean_gx);
                        }
                    }
                    Mode::Eval => {
                        for i in off..off + plane {
                            grad_in[i] = scale * g[i];
                        }
                    }
                }
            }
        }

        let grads = BatchNormGrads {
            input: Tensor::from_vec(cache.dims.to_vec(), grad_in)?,
            gamma: Tensor::from_vec(vec![channels], sum_gx)?,
            beta: Tensor::from_vec(vec![channels], sum_g)?,
        };
        grads.input.ensure_finite("batchnorm_backward")?;
        Ok(grads)
    }
}
