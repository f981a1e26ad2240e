use rand::Rng;

use super::{join, Layer, Mode, Param, Parameterized};
use crate::dsp::{self, ConvGeometry, WindowSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Kernel-windowed 1-D convolution with bias: `y = conv(x, W·k) + b`.
///
/// The window is a fixed buffer; only `kernels` and `bias` are trained.
#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub kernels: Param<T>,
    pub bias: Param<T>,
    window_spec: WindowSpec,
    window: Tensor<T>,
    geom: ConvGeometry,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    padded: Vec<T>,
    effective: Tensor<T>,
    batch: usize,
    len: usize,
    frames: usize,
}

impl<T: Real> ConvLayer<T> {
    /// Kernels uniform in `±1/sqrt(in_channels * kernel_size)`, zero bias.
    pub fn new(geom: ConvGeometry, window: WindowSpec, rng: &mut impl Rng) -> Result<Self> {
        geom.validate()?;
        if window.length != geom.kernel_size {
            return Err(Error::invalid(format!(
                "window length {} != kernel size {}",
                window.length, geom.kernel_size
            )));
        }
        let bound = 1.0 / ((geom.in_channels * geom.kernel_size) as f64).sqrt();
        Ok(ConvLayer {
            kernels: Param::uniform(
                &[geom.out_channels, geom.in_channels, geom.kernel_size],
                bound,
                rng,
            ),
            bias: Param::new(Tensor::zeros(&[geom.out_channels])),
            window: dsp::make_window(&window)?,
            window_spec: window,
            geom,
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
}

impl<T: Real> Parameterized<T> for ConvLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "kernel"), &mut self.kernels);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Real> Layer<T> for ConvLayer<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (batch, cin, len) = input.dims3()?;
        let g = self.geom;
        if cin != g.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {cin}",
                g.in_channels
            )));
        }
        let frames = g.output_frames(len).ok_or_else(|| {
            Error::invalid(format!(
                "input of {len} samples is shorter than one {}-sample frame",
                g.kernel_size
            ))
        })?;
        let effective = dsp::apply_window(&self.kernels.value, &self.window, g.kernel_size)?;
        let padded_len = len + g.causal_left_pad;
        let mut padded = Vec::with_capacity(batch * cin * padded_len);
        let mut out = vec![T::zero(); batch * g.out_channels * frames];
        for b in 0..batch {
            let x = &input.data()[b * cin * len..(b + 1) * cin * len];
            let xp = dsp::left_pad(x, cin, len, g.causal_left_pad);
            let y = &mut out[b * g.out_channels * frames..(b + 1) * g.out_channels * frames];
            dsp::correlate(
                &xp,
                cin,
                padded_len,
                effective.data(),
                g.out_channels,
                g.kernel_size,
                g.stride,
                frames,
                y,
            );
            for (o, row) in y.chunks_exact_mut(frames).enumerate() {
                let bias = self.bias.value.data()[o];
                row.iter_mut().for_each(|v| *v += bias);
            }
            if mode == Mode::Train {
                padded.extend_from_slice(&xp);
            }
        }
        self.cache = (mode == Mode::Train).then(|| ConvCache {
            padded,
            effective,
            batch,
            len,
            frames,
        });
        let out = Tensor::from_vec(&[batch, g.out_channels, frames], out)?;
        out.ensure_finite("conv output")?;
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(Error::MissingForward("conv"))?;
        let g = self.geom;
        let (batch, cin, len, frames) = (cache.batch, g.in_channels, cache.len, cache.frames);
        grad_output.expect_shape(&[batch, g.out_channels, frames])?;
        let padded_len = len + g.causal_left_pad;
        let mut d_eff = vec![T::zero(); self.kernels.value.len()];
        let mut grad_in = vec![T::zero(); batch * cin * len];
        let mut d_padded = vec![T::zero(); cin * padded_len];
        for b in 0..batch {
            let gy = &grad_output.data()[b * g.out_channels * frames..(b + 1) * g.out_channels * frames];
            let xp = &cache.padded[b * cin * padded_len..(b + 1) * cin * padded_len];
            dsp::weight_grad(gy, g.out_channels, frames, xp, cin, padded_len, g.kernel_size, g.stride, &mut d_eff);
            for (o, row) in gy.chunks_exact(frames).enumerate() {
                self.bias.grad.data_mut()[o] += row.iter().fold(T::zero(), |a, &v| a + v);
            }
            d_padded.fill(T::zero());
            dsp::scatter(
                gy,
                g.out_channels,
                frames,
                cache.effective.data(),
                cin,
                g.kernel_size,
                g.stride,
                &mut d_padded,
                padded_len,
            );
            for c in 0..cin {
                grad_in[(b * cin + c) * len..(b * cin + c + 1) * len]
                    .copy_from_slice(&d_padded[c * padded_len + g.causal_left_pad..(c + 1) * padded_len]);
            }
        }
        let m = g.kernel_size;
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
        Tensor::from_vec(&[batch, cin, len], grad_in)
    }
}
