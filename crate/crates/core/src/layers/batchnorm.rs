use super::{join, Layer, Mode, Param, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel batch normalization over the (batch, frames) axes.
///
/// Training mode standardizes with batch statistics and updates the running
/// averages (`running = (1 - momentum) * running + momentum * batch`, with the
/// unbiased variance). Eval mode is a fixed affine map per channel.
#[derive(Debug, Clone)]
pub struct BatchNormLayer<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    shape: [usize; 3],
}

impl<T: Real> BatchNormLayer<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: Self::DEFAULT_EPS,
            momentum: Self::DEFAULT_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl<T: Real> Parameterized<T> for BatchNormLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

impl<T: Real> Layer<T> for BatchNormLayer<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (batch, ch, len) = input.dims3()?;
        if ch != self.channels() {
            return Err(Error::shape(format!(
                "batch norm has {} channels, input has {ch}",
                self.channels()
            )));
        }
        let x = input.data();
        let mut out = vec![T::zero(); x.len()];
        let eps = T::of(self.eps);
        match mode {
            Mode::Eval => {
                for c in 0..ch {
                    let inv = (self.running_var.data()[c] + eps).sqrt().recip();
                    let scale = self.gamma.value.data()[c] * inv;
                    let shift = self.beta.value.data()[c] - scale * self.running_mean.data()[c];
                    for b in 0..batch {
                        let base = (b * ch + c) * len;
                        for t in 0..len {
                            out[base + t] = scale * x[base + t] + shift;
                        }
                    }
                }
                self.cache = None;
            }
            Mode::Train => {
                if batch < 2 {
                    return Err(Error::invalid(
                        "batch norm in training mode needs a batch of at least 2",
                    ));
                }
                let n = batch * len;
                let nt = T::of(n as f64);
                let momentum = T::of(self.momentum);
                let mut normalized = vec![T::zero(); x.len()];
                let mut inv_std = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut sum = T::zero();
                    for b in 0..batch {
                        let base = (b * ch + c) * len;
                        sum += x[base..base + len].iter().fold(T::zero(), |a, &v| a + v);
                    }
                    let mean = sum / nt;
                    let mut sq = T::zero();
                    for b in 0..batch {
                        let base = (b * ch + c) * len;
                        sq += x[base..base + len]
                            .iter()
                            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean));
                    }
                    let var = sq / nt;
                    let inv = (var + eps).sqrt().recip();
                    inv_std[c] = inv;
                    let (gamma, beta) = (self.gamma.value.data()[c], self.beta.value.data()[c]);
                    for b in 0..batch {
                        let base = (b * ch + c) * len;
                        for t in 0..len {
                            let xh = (x[base + t] - mean) * inv;
                            normalized[base + t] = xh;
                            out[base + t] = gamma * xh + beta;
                        }
                    }
                    let unbiased = if n > 1 { sq / T::of((n - 1) as f64) } else { var };
                    let rm = &mut self.running_mean.data_mut()[c];
                    *rm = (T::one() - momentum) * *rm + momentum * mean;
                    let rv = &mut self.running_var.data_mut()[c];
                    *rv = (T::one() - momentum) * *rv + momentum * unbiased;
                }
                self.cache = Some(BnCache {
                    normalized,
                    inv_std,
                    shape: [batch, ch, len],
                });
            }
        }
        let out = Tensor::from_vec(&[batch, ch, len], out)?;
        out.ensure_finite("batch norm output")?;
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingForward("batch norm"))?;
        let [batch, ch, len] = cache.shape;
        grad_output.expect_shape(&cache.shape)?;
        let g = grad_output.data();
        let xh = &cache.normalized;
        let nt = T::of((batch * len) as f64);
        let mut dx = vec![T::zero(); g.len()];
        for c in 0..ch {
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for b in 0..batch {
                let base = (b * ch + c) * len;
                for t in base..base + len {
                    sum_g += g[t];
                    sum_gx += g[t] * xh[t];
                }
            }
            self.gamma.grad.data_mut()[c] += sum_gx;
            self.beta.grad.data_mut()[c] += sum_g;
            let k = self.gamma.value.data()[c] * cache.inv_std[c] / nt;
            for b in 0..batch {
                let base = (b * ch + c) * len;
                for t in base..base + len {
                    dx[t] = k * (nt * g[t] - sum_g - xh[t] * sum_gx);
                }
            }
        }
        Tensor::from_vec(&cache.shape, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{check_layer, random};

    #[test]
    fn standardizes_each_channel() {
        // Channel 0: mean 5, var 4; channel 1: mean -1, var 9.
        let x = Tensor::from_vec(
            &[2, 2, 2],
            vec![3.0, 7.0, -4.0, 2.0, 3.0, 7.0, -4.0, 2.0],
        )
        .unwrap();
        let mut bn = BatchNormLayer::<f64>::new(2);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.data()[(b * 2 + c) * 2..(b * 2 + c) * 2 + 2].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 4.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
        assert!((bn.running_mean.data()[0] - 0.5).abs() < 1e-12);
        // Unbiased variance 16/3 blended with momentum 0.1.
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 16.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn train_mode_rejects_single_item_batch() {
        let mut bn = BatchNormLayer::<f64>::new(3);
        assert!(bn.forward(&random(&[1, 3, 5], 1), Mode::Train).is_err());
        assert!(bn.forward(&random(&[1, 3, 5], 1), Mode::Eval).is_ok());
    }

    #[test]
    fn eval_mode_is_per_item_affine() {
        let mut bn = BatchNormLayer::<f64>::new(3);
        bn.running_mean = random(&[3], 4);
        bn.running_var = random(&[3], 5).map(|v| v.abs() + 0.5);
        bn.gamma.value = random(&[3], 6);
        let x = random(&[4, 3, 7], 2);
        let y = bn.forward(&x, Mode::Eval).unwrap();
        let one = Tensor::from_vec(&[1, 3, 7], x.data()[21..42].to_vec()).unwrap();
        let y1 = bn.forward(&one, Mode::Eval).unwrap();
        assert_eq!(&y.data()[21..42], y1.data());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut bn = BatchNormLayer::<f64>::new(3);
        bn.gamma.value = random(&[3], 10);
        bn.beta.value = random(&[3], 11);
        let x = random(&[2, 3, 6], 12).map(|v| 3.0 * v + 1.0);
        let r = check_layer(&mut bn, &x, 13);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
