use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type TensorMap = BTreeMap<String, Tensor>;

/// SGD with classical momentum and L2 weight decay folded into the gradient:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: TensorMap,
}

impl SgdState {
    /// Creates zero velocity buffers for every tensor in `params`.
    pub fn new<'a>(
        params: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
        learning_rate: f32,
        momentum: f32,
        weight_decay: f32,
    ) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Input(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Input(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Input(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        let velocity = params
            .into_iter()
            .map(|(name, p)| (name.clone(), Tensor::zeros(p.shape())))
            .collect();
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity,
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

/// Applies one update to every parameter that has a gradient. Nothing is
/// modified if any gradient is non-finite or mis-shaped.
pub fn sgd_step(params: &mut TensorMap, grads: &TensorMap, state: &mut SgdState) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Input(format!("gradient for unknown parameter {name}")))?;
        let v = state
            .velocity
            .get(name)
            .ok_or_else(|| Error::Input(format!("no velocity buffer for parameter {name}")))?;
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::dim(
                "sgd_step",
                format!("{name} of shape {:?}", p.shape()),
                format!("grad {:?}, velocity {:?}", g.shape(), v.shape()),
            ));
        }
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "sgd_step",
                detail: format!("gradient of {name} element {i} is {}", g.data()[i]),
            });
        }
    }
    let (lr, mom, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let v = state.velocity.get_mut(name).expect("checked above");
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mom * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> TensorMap {
        BTreeMap::from([("w".to_string(), Tensor::scalar(value))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = single(1.5);
        let mut state = SgdState::new(&params.clone(), 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut params, &single(0.0), &mut state).unwrap();
        assert_eq!(params["w"].data(), &[1.5]);
    }

    #[test]
    fn plain_step() {
        let mut params = single(1.0);
        let mut state = SgdState::new(&params.clone(), 0.1, 0.0, 0.0).unwrap();
        sgd_step(&mut params, &single(1.0), &mut state).unwrap();
        assert!((params["w"].data()[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn two_step_momentum_matches_hand_unroll() {
        let (lr, mom, wd) = (0.1f32, 0.9f32, 1e-4f32);
        let (g1, g2) = (0.5f32, -0.25f32);
        let mut params = single(1.0);
        let mut state = SgdState::new(&params.clone(), lr, mom, wd).unwrap();
        sgd_step(&mut params, &single(g1), &mut state).unwrap();
        sgd_step(&mut params, &single(g2), &mut state).unwrap();

        let p0 = 1.0f32;
        let v1 = g1 + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mom * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        assert!((params["w"].data()[0] - p2).abs() < 1e-7);
        assert!((state.velocity("w").unwrap().data()[0] - v2).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut params = single(1.0);
        let mut state = SgdState::new(&params.clone(), 0.1, 0.9, 0.0).unwrap();
        let err = sgd_step(&mut params, &single(f32::NAN), &mut state).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(params["w"].data(), &[1.0]);
    }
}
