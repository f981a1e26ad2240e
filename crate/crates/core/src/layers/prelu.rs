use super::{join, Layer, Mode, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Parametric ReLU with one learned slope per channel.
#[derive(Debug, Clone)]
pub struct PReluLayer<T> {
    pub alpha: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> PReluLayer<T> {
    pub const DEFAULT_SLOPE: f64 = 0.25;

    pub fn new(channels: usize) -> Self {
        PReluLayer {
            alpha: Param::new(Tensor::full(&[channels], T::of(Self::DEFAULT_SLOPE))),
            cache: None,
        }
    }
}

impl<T: Real> Parameterized<T> for PReluLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "alpha"), &mut self.alpha);
    }
}

impl<T: Real> Layer<T> for PReluLayer<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, ch, len) = input.dims3()?;
        if ch != self.alpha.value.len() {
            return Err(Error::shape(format!(
                "prelu has {} channels, input has {ch}",
                self.alpha.value.len()
            )));
        }
        let mut out = input.clone();
        for (i, row) in out.data_mut().chunks_exact_mut(len).enumerate() {
            let a = self.alpha.value.data()[i % ch];
            for v in row.iter_mut() {
                if *v < T::zero() {
                    *v *= a;
                }
            }
        }
        self.cache = (mode == Mode::Train).then(|| input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.as_ref().ok_or(Error::MissingForward("prelu"))?;
        grad_output.expect_shape(x.shape())?;
        let (_, ch, len) = x.dims3()?;
        let mut dx = grad_output.clone();
        for (i, (drow, xrow)) in dx
            .data_mut()
            .chunks_exact_mut(len)
            .zip(x.data().chunks_exact(len))
            .enumerate()
        {
            let c = i % ch;
            let a = self.alpha.value.data()[c];
            let mut da = T::zero();
            for (d, &xv) in drow.iter_mut().zip(xrow) {
                if xv < T::zero() {
                    da += *d * xv;
                    *d *= a;
                }
            }
            self.alpha.grad.data_mut()[c] += da;
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{check_layer, random};

    #[test]
    fn leaky_map() {
        let mut p = PReluLayer::<f64>::new(1);
        let y = p
            .forward(&Tensor::from_vec(&[1, 1, 2], vec![-2.0, 3.0]).unwrap(), Mode::Train)
            .unwrap();
        assert_eq!(y.data(), &[-0.5, 3.0]);
    }

    #[test]
    fn slope_gradient() {
        let mut p = PReluLayer::<f64>::new(1);
        p.forward(&Tensor::from_vec(&[1, 1, 1], vec![-2.0]).unwrap(), Mode::Train)
            .unwrap();
        let dx = p.backward(&Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        assert_eq!(p.alpha.grad.data(), &[-2.0]);
        assert_eq!(dx.data(), &[0.25]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut p = PReluLayer::<f64>::new(3);
        p.alpha.value = random(&[3], 3);
        let r = check_layer(&mut p, &random(&[2, 3, 9], 4), 5);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gradients_accumulate() {
        let mut p = PReluLayer::<f64>::new(1);
        let x = Tensor::from_vec(&[1, 1, 1], vec![-2.0]).unwrap();
        for _ in 0..2 {
            p.forward(&x, Mode::Train).unwrap();
            p.backward(&Tensor::full(&[1, 1, 1], 1.0)).unwrap();
        }
        assert_eq!(p.alpha.grad.data(), &[-4.0]);
    }
}
