use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let [batch, classes] = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{batch} labels"),
            format!("{} labels", labels.len()),
        ));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Input(format!(
            "label {l} at position {i} outside class range [0, {classes})"
        )));
    }
    let inv_batch = T::one() / T::lit(batch as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); batch * classes];
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for &v in row {
            z += (v - max).exp();
        }
        let log_z = z.ln() + max;
        loss += log_z - row[label];
        let g = &mut grad[b * classes..(b + 1) * classes];
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - log_z).exp() * inv_batch;
        }
        g[label] -= inv_batch;
    }
    let loss = loss * inv_batch;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax_cross_entropy",
            detail: format!("loss is {loss}"),
        });
    }
    Ok((loss, Tensor::from_vec(vec![batch, classes], grad)?))
}
