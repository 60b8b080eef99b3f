use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Default)]
pub struct Relu {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Tensor<T> {
        let mask: Vec<bool> = input.data().iter().map(|&v| v > T::zero()).collect();
        let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
        self.mask = Some((input.shape().to_vec(), mask));
        out
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, mask) = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Usage("relu backward called before forward".into()))?;
        if grad_out.shape() != shape.as_slice() {
            return Err(Error::dim(
                "relu_backward",
                format!("{shape:?}"),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let data = grad_out
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &keep)| if keep { g } else { T::zero() })
            .collect();
        Tensor::from_vec(shape.clone(), data)
    }
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::<f32>::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let mut layer = Relu::new();
        layer.forward(&x);
        let g = layer.backward(&Tensor::full(&[3], 1.0f32)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }
}
