use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Fully connected layer `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug)]
pub struct Linear<T = f32> {
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<[usize; 3]> {
    let [batch, in_features] = input.dims2("linear input")?;
    let [out_features, w_in] = weight.dims2("linear weight")?;
    if w_in != in_features {
        return Err(Error::dim(
            "linear",
            format!("weight [_, {in_features}] for input {:?}", input.shape()),
            format!("weight {:?}", weight.shape()),
        ));
    }
    if bias.shape() != [out_features] {
        return Err(Error::dim(
            "linear bias",
            format!("[{out_features}]"),
            format!("{:?}", bias.shape()),
        ));
    }
    Ok([batch, in_features, out_features])
}

pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [batch, fin, fout] = check(input, weight, bias)?;
    let x = input.data();
    let w = weight.data();
    let mut out = vec![T::zero(); batch * fout];
    out.par_chunks_mut(fout).enumerate().for_each(|(b, row)| {
        let xr = &x[b * fin..(b + 1) * fin];
        for (o, y) in row.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (&a, &wv) in xr.iter().zip(&w[o * fin..(o + 1) * fin]) {
                acc += a * wv;
            }
            *y = acc + bias.data()[o];
        }
    });
    let out = Tensor::from_vec(vec![batch, fout], out)?;
    out.ensure_finite("linear_forward")?;
    Ok(out)
}

impl<T: Scalar> Default for Linear<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Linear<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(
        &mut self,
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let out = linear_forward(input, weight, bias)?;
        self.cache = Some((input.clone(), weight.clone()));
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
        let (input, weight) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("linear backward called before forward".into()))?;
        let [batch, fin] = input.dims2("linear input")?;
        let [fout, _] = weight.dims2("linear weight")?;
        if grad_out.shape() != [batch, fout] {
            return Err(Error::dim(
                "linear_backward",
                format!("[{batch}, {fout}]"),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let g = grad_out.data();
        let x = input.data();
        let w = weight.data();

        let mut gx = vec![T::zero(); batch * fin];
        for b in 0..batch {
            let row = &mut gx[b * fin..(b + 1) * fin];
            for o in 0..fout {
                let gv = g[b * fout + o];
                for (r, &wv) in row.iter_mut().zip(&w[o * fin..(o + 1) * fin]) {
                    *r += gv * wv;
                }
            }
        }
        let mut gw = vec![T::zero(); fout * fin];
        let mut gb = vec![T::zero(); fout];
        for b in 0..batch {
            let xr = &x[b * fin..(b + 1) * fin];
            for o in 0..fout {
                let gv = g[b * fout + o];
                gb[o] += gv;
                for (r, &xv) in gw[o * fin..(o + 1) * fin].iter_mut().zip(xr) {
                    *r += gv * xv;
                }
            }
        }
        Ok(LinearGrads {
            input: Tensor::from_vec(vec![batch, fin], gx)?,
            weight: Tensor::from_vec(vec![fout, fin], gw)?,
            bias: Tensor::from_vec(vec![fout], gb)?,
        })
    }
}
