use rand::Rng;

use super::{join, Layer, Mode, Param, Parameterized};
use crate::dsp::{self, ConvGeometry, WindowSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Clamp applied to the sum-square window envelope before division.
pub const ENVELOPE_CLAMP: (f64, f64) = (0.1, 1.0);

/// Kernel-windowed transposed convolution with bias, optionally divided by the
/// clamped sum-square envelope of its window: `y = (deconv(h, W·k) + b) / env`.
#[derive(Debug, Clone)]
pub struct DeconvLayer<T> {
    pub kernels: Param<T>,
    pub bias: Param<T>,
    window_spec: WindowSpec,
    window: Tensor<T>,
    geom: ConvGeometry,
    envelope_normalize: bool,
    cache: Option<DeconvCache<T>>,
}

#[derive(Debug, Clone)]
struct DeconvCache<T> {
    input: Tensor<T>,
    effective: Tensor<T>,
    inv_env: Vec<T>,
}

impl<T: Real> DeconvLayer<T> {
    /// `geom.in_channels` frames channels in, `geom.out_channels` signals out.
    /// Kernels uniform in `±1/sqrt(in_channels * kernel_size)`, zero bias.
    pub fn new(
        geom: ConvGeometry,
        window: WindowSpec,
        envelope_normalize: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        geom.validate()?;
        if window.length != geom.kernel_size {
            return Err(Error::invalid(format!(
                "window length {} != kernel size {}",
                window.length, geom.kernel_size
            )));
        }
        let bound = 1.0 / ((geom.in_channels * geom.kernel_size) as f64).sqrt();
        Ok(DeconvLayer {
            kernels: Param::uniform(
                &[geom.in_channels, geom.out_channels, geom.kernel_size],
                bound,
                rng,
            ),
            bias: Param::new(Tensor::zeros(&[geom.out_channels])),
            window: dsp::make_window(&window)?,
            window_spec: window,
            geom,
            envelope_normalize,
            cache: None,
        })
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geom
    }

    pub fn window(&self) -> &Tensor<T> {
        &self.window
    }

    pub fn window_spec(&self) -> WindowSpec {
        self.window_spec
    }

    pub fn envelope_normalize(&self) -> bool {
        self.envelope_normalize
    }

    /// Output length for `frames` input frames.
    pub fn output_len(&self, frames: usize) -> usize {
        self.geom.deconv_len(frames)
    }

    fn inverse_envelope(&self, frames: usize) -> Result<Vec<T>> {
        let len = self.output_len(frames);
        if !self.envelope_normalize {
            return Ok(vec![T::one(); len]);
        }
        let env = dsp::sum_square_envelope(
            &self.window,
            self.geom.stride,
            frames,
            ENVELOPE_CLAMP.0,
            ENVELOPE_CLAMP.1,
        )?;
        Ok(env.data().iter().map(|&e| e.recip()).collect())
    }
}

impl<T: Real> Parameterized<T> for DeconvLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "kernel"), &mut self.kernels);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> Layer<T> for DeconvLayer<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (batch, cin, frames) = input.dims3()?;
        let g = self.geom;
        if cin != g.in_channels {
            return Err(Error::shape(format!(
                "deconv expects {} input channels, got {cin}",
                g.in_channels
            )));
        }
        let effective = dsp::apply_window(&self.kernels.value, &self.window, g.kernel_size)?;
        let inv_env = self.inverse_envelope(frames)?;
        let len = inv_env.len();
        let cout = g.out_channels;
        let mut out = vec![T::zero(); batch * cout * len];
        for b in 0..batch {
            let h = &input.data()[b * cin * frames..(b + 1) * cin * frames];
            let y = &mut out[b * cout * len..(b + 1) * cout * len];
            dsp::scatter(h, cin, frames, effective.data(), cout, g.kernel_size, g.stride, y, len);
            for (o, row) in y.chunks_exact_mut(len).enumerate() {
                let bias = self.bias.value.data()[o];
                for (v, &ie) in row.iter_mut().zip(&inv_env) {
                    *v = (*v + bias) * ie;
                }
            }
        }
        self.cache = (mode == Mode::Train).then(|| DeconvCache {
            input: input.clone(),
            effective,
            inv_env,
        });
        let out = Tensor::from_vec(&[batch, cout, len], out)?;
        out.ensure_finite("deconv output")?;
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingForward("deconv"))?;
        let (batch, cin, frames) = cache.input.dims3()?;
        let g = self.geom;
        let (cout, len, m) = (g.out_channels, cache.inv_env.len(), g.kernel_size);
        grad_output.expect_shape(&[batch, cout, len])?;
        let mut d_eff = vec![T::zero(); self.kernels.value.len()];
        let mut dh = vec![T::zero(); batch * cin * frames];
        let mut g_pre = vec![T::zero(); cout * len];
        for b in 0..batch {
            let gy = &grad_output.data()[b * cout * len..(b + 1) * cout * len];
            for (o, (dst, src)) in g_pre.chunks_exact_mut(len).zip(gy.chunks_exact(len)).enumerate() {
                let mut bias_grad = T::zero();
                for ((d, &s), &ie) in dst.iter_mut().zip(src).zip(&cache.inv_env) {
                    *d = s * ie;
                    bias_grad += *d;
                }
                self.bias.grad.data_mut()[o] += bias_grad;
            }
            let h = &cache.input.data()[b * cin * frames..(b + 1) * cin * frames];
            dsp::weight_grad(h, cin, frames, &g_pre, cout, len, m, g.stride, &mut d_eff);
            dsp::correlate(
                &g_pre,
                cout,
                len,
                cache.effective.data(),
                cin,
                m,
                g.stride,
                frames,
                &mut dh[b * cin * frames..(b + 1) * cin * frames],
            );
        }
        for (row, d_row) in self
            .kernels
            .grad
            .data_mut()
            .chunks_exact_mut(m)
            .zip(d_eff.chunks_exact(m))
        {
            for ((gk, &d), &w) in row.iter_mut().zip(d_row).zip(self.window.data()) {
                *gk += d * w;
            }
        }
        Tensor::from_vec(&[batch, cin, frames], dh)
    }
}
