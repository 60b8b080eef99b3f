use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
#[derive(Debug, Default)]
pub struct MaxPool2x2 {
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let dims @ [b, c, h, w] = input.dims4("maxpool2x2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::dim(
                "maxpool2x2",
                "spatial dims >= 2",
                format!("{:?}", input.shape()),
            ));
        }
        let x = input.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        // first maximum wins ties
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        self.cache = Some((dims, argmax));
        Tensor::from_vec(vec![b, c, oh, ow], out)
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (dims, argmax) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("maxpool backward called before forward".into()))?;
        if grad_out.numel() != argmax.len() {
            return Err(Error::dim(
                "maxpool2x2_backward",
                format!("{} elements", argmax.len()),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let mut grad = vec![T::zero(); dims.iter().product()];
        for (&g, &idx) in grad_out.data().iter().zip(argmax) {
            grad[idx] += g;
        }
        Tensor::from_vec(dims.to_vec(), grad)
    }
}

/// Global average pooling `[B, C, H, W] -> [B, C]`.
#[derive(Debug, Default)]
pub struct GlobalAvgPool {
    dims: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Scalar>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let dims @ [b, c, h, w] = input.dims4("global_avg_pool")?;
        let plane = h * w;
        let scale = T::one() / T::lit(plane as f64);
        let out = input
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        self.dims = Some(dims);
        Tensor::from_vec(vec![b, c], out)
    }

    pub fn backward<T: Scalar>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let dims @ [b, c, h, w] = self
            .dims
            .ok_or_else(|| Error::Usage("global_avg_pool backward called before forward".into()))?;
        if grad_out.shape() != [b, c] {
            return Err(Error::dim(
                "global_avg_pool_backward",
                format!("[{b}, {c}]"),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let plane = h * w;
        let scale = T::one() / T::lit(plane as f64);
        let data = grad_out
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * scale, plane))
            .collect();
        Tensor::from_vec(dims.to_vec(), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::<f32>::from_vec(
            vec![1, 1, 2, 4],
            vec![1.0, 5.0, -2.0, -1.0, 3.0, 2.0, -3.0, -4.0],
        )
        .unwrap();
        let mut pool = MaxPool2x2::new();
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, -1.0]);
        let g = pool
            .backward(&Tensor::from_vec(vec![1, 1, 1, 2], vec![10.0f32, 20.0]).unwrap())
            .unwrap();
        assert_eq!(g.data(), &[0.0, 10.0, 0.0, 20.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_averages_planes() {
        let x = Tensor::<f64>::from_vec(vec![1, 2, 1, 2], vec![1.0, 3.0, -2.0, 2.0]).unwrap();
        let mut gap = GlobalAvgPool::new();
        assert_eq!(gap.forward(&x).unwrap().data(), &[2.0, 0.0]);
        let g = gap
            .backward(&Tensor::from_vec(vec![1, 2], vec![2.0, 4.0]).unwrap())
            .unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
