//! TCRB blocks and the stacked TCRN.
//!
//! A block maps a waveform batch `[B, T]` to `[B, T]`:
//!
//! ```text
//! h = PReLU(BN(Conv(x)))          // [B, K, T/stride], downsampled
//! r = h + LSTM(h)                 // residual around the recurrence
//! y = x + Deconv(r)[.., ..T]      // upsampled back, residual around the block
//! ```
//!
//! The conv is left-padded by `kernel_size - stride` zeros and the deconv
//! output keeps its first `T` samples, so output hop `q` (samples
//! `[q*stride, (q+1)*stride)`) depends only on input hops `<= q`. That
//! property is closed under composition, so the whole stack has at most
//! `stride - 1` samples of lookahead regardless of depth.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{ConvGeometry, WindowKind, WindowSpec};
use crate::error::{Error, Result};
use crate::layers::{
    BatchNormLayer, ConvLayer, DeconvLayer, Layer, LstmLayer, Mode, PReluLayer, Param,
    Parameterized,
};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcrbConfig {
    pub channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub lstm_hidden: usize,
    pub window: WindowKind,
}

impl Default for TcrbConfig {
    fn default() -> Self {
        TcrbConfig {
            channels: 256,
            kernel_size: 320,
            stride: 160,
            lstm_hidden: 256,
            window: WindowKind::HannPeriodic,
        }
    }
}

impl TcrbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("block channels must be >= 1"));
        }
        if self.stride == 0 || self.kernel_size != 2 * self.stride {
            return Err(Error::invalid(format!(
                "stride must be half the kernel size (kernel {}, stride {})",
                self.kernel_size, self.stride
            )));
        }
        if self.lstm_hidden != self.channels {
            return Err(Error::invalid(format!(
                "lstm_hidden ({}) must equal channels ({}) for the LSTM residual",
                self.lstm_hidden, self.channels
            )));
        }
        Ok(())
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            kind: self.window,
            length: self.kernel_size,
        }
    }

    pub fn causal_left_pad(&self) -> usize {
        self.kernel_size - self.stride
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcrnConfig {
    pub n_blocks: usize,
    pub block: TcrbConfig,
    pub sample_rate: u32,
}

impl Default for TcrnConfig {
    fn default() -> Self {
        TcrnConfig {
            n_blocks: 4,
            block: TcrbConfig::default(),
            sample_rate: 16_000,
        }
    }
}

impl TcrnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::invalid("n_blocks must be >= 1"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be > 0"));
        }
        self.block.validate()
    }

    /// Key-value pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_blocks", self.n_blocks.to_string()),
            ("channels", self.block.channels.to_string()),
            ("kernel_size", self.block.kernel_size.to_string()),
            ("stride", self.block.stride.to_string()),
            ("lstm_hidden", self.block.lstm_hidden.to_string()),
            ("window", self.block.window.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
        ]
    }

    /// Build from key-value pairs, defaulting missing keys. Unknown keys are ignored.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<V: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str, default: V) -> Result<V> {
            match pairs.get(key) {
                None => Ok(default),
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`"))),
            }
        }
        let d = TcrnConfig::default();
        let channels = get(pairs, "channels", d.block.channels)?;
        let cfg = TcrnConfig {
            n_blocks: get(pairs, "n_blocks", d.n_blocks)?,
            block: TcrbConfig {
                channels,
                kernel_size: get(pairs, "kernel_size", d.block.kernel_size)?,
                stride: get(pairs, "stride", d.block.stride)?,
                lstm_hidden: get(pairs, "lstm_hidden", channels)?,
                window: match pairs.get("window") {
                    Some(w) => w.parse()?,
                    None => d.block.window,
                },
            },
            sample_rate: get(pairs, "sample_rate", d.sample_rate)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for TcrnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_pairs() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// One Conv→BN→PReLU→LSTM→Deconv block with its two residual connections.
#[derive(Debug, Clone)]
pub struct Tcrb<T> {
    pub conv: ConvLayer<T>,
    pub bn: BatchNormLayer<T>,
    pub prelu: PReluLayer<T>,
    pub lstm: LstmLayer<T>,
    pub deconv: DeconvLayer<T>,
    config: TcrbConfig,
    cached_len: Option<(usize, usize, usize)>,
}

impl<T: Real> Tcrb<T> {
    pub fn new(config: TcrbConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let k = config.channels;
        let window = config.window_spec();
        let conv_geom = ConvGeometry::new(config.kernel_size, config.stride, 1, k)
            .with_left_pad(config.causal_left_pad());
        let deconv_geom = ConvGeometry::new(config.kernel_size, config.stride, k, 1);
        Ok(Tcrb {
            conv: ConvLayer::new(conv_geom, window, rng)?,
            bn: BatchNormLayer::new(k),
            prelu: PReluLayer::new(k),
            lstm: LstmLayer::new(k, config.lstm_hidden, rng),
            deconv: DeconvLayer::new(deconv_geom, window, true, rng)?,
            config,
            cached_len: None,
        })
    }

    pub fn config(&self) -> &TcrbConfig {
        &self.config
    }

    /// Number of internal frames for an input of `len` samples.
    pub fn frames(&self, len: usize) -> Option<usize> {
        self.conv.geometry().output_frames(len)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (batch, len) = x.dims2()?;
        let stride = self.config.stride;
        if len == 0 || len % stride != 0 {
            return Err(Error::invalid(format!(
                "signal length {len} is not a positive multiple of the stride {stride}"
            )));
        }
        let x3 = x.clone().reshape(&[batch, 1, len])?;
        let a = self.conv.forward(&x3, mode)?;
        let a = self.bn.forward(&a, mode)?;
        let h = self.prelu.forward(&a, mode)?;
        let r = h.add(&self.lstm.forward(&h, mode)?)?;
        let d = self.deconv.forward(&r, mode)?;
        let full = d.shape()[2];
        let mut y = x.clone();
        for b in 0..batch {
            let src = &d.data()[b * full..b * full + len];
            for (v, &s) in y.data_mut()[b * len..(b + 1) * len].iter_mut().zip(src) {
                *v += s;
            }
        }
        self.cached_len = (mode == Mode::Train).then_some((batch, len, full));
        y.ensure_finite("block output")?;
        Ok(y)
    }

    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, len, full) = self.cached_len.ok_or(Error::MissingForward("tcrb"))?;
        grad_output.expect_shape(&[batch, len])?;
        let mut gd = vec![T::zero(); batch * full];
        for b in 0..batch {
            gd[b * full..b * full + len].copy_from_slice(&grad_output.data()[b * len..(b + 1) * len]);
        }
        let gd = Tensor::from_vec(&[batch, 1, full], gd)?;
        let gr = self.deconv.backward(&gd)?;
        let gh = gr.add(&self.lstm.backward(&gr)?)?;
        let ga = self.prelu.backward(&gh)?;
        let ga = self.bn.backward(&ga)?;
        let gx = self.conv.backward(&ga)?;
        let gx = gx.reshape(&[batch, len])?;
        grad_output.add(&gx)
    }

    pub fn reset_state(&mut self) {
        self.lstm.reset_state();
    }
}

impl<T: Real> Layer<T> for Tcrb<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Tcrb::forward(self, input, mode)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        Tcrb::backward(self, grad_output)
    }

    fn reset_state(&mut self) {
        Tcrb::reset_state(self)
    }
}

impl<T: Real> Parameterized<T> for Tcrb<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
        self.prelu.visit_params(&format!("{prefix}.prelu"), f);
        self.lstm.visit_params(&format!("{prefix}.lstm"), f);
        self.deconv.visit_params(&format!("{prefix}.deconv"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }
}

/// Stack of TCRBs mapping noisy waveforms to enhanced waveforms.
#[derive(Debug, Clone)]
pub struct Tcrn<T> {
    config: TcrnConfig,
    blocks: Vec<Tcrb<T>>,
}

impl<T: Real> Tcrn<T> {
    /// Randomly initialized model; identical seeds give identical weights.
    pub fn new(config: TcrnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..config.n_blocks)
            .map(|_| Tcrb::new(config.block, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Tcrn { config, blocks })
    }

    /// Model with every trainable parameter set to zero: the identity map.
    pub fn zeroed(config: TcrnConfig) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.zero_params();
        Ok(model)
    }

    pub fn config(&self) -> &TcrnConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Tcrb<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Tcrb<T>] {
        &mut self.blocks
    }

    pub fn stride(&self) -> usize {
        self.config.block.stride
    }

    /// Worst-case number of future samples any output sample depends on.
    pub fn lookahead_samples(&self) -> usize {
        self.config.block.stride - 1
    }

    /// Clear every block's LSTM state; call between independent utterances.
    pub fn reset_state(&mut self) {
        self.blocks.iter_mut().for_each(Tcrb::reset_state);
    }

    /// Forward `[B, T]` noisy waveforms; `T` must be a multiple of the stride.
    pub fn forward(&mut self, noisy: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut x = noisy.clone();
        for block in &mut self.blocks {
            x = block.forward(&x, mode)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_output.clone();
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        Ok(g)
    }

    /// Enhance one utterance of any length: zero-pad to a multiple of the
    /// stride, run in eval mode from a fresh state, and trim back.
    pub fn enhance(&mut self, signal: &[T]) -> Result<Vec<T>> {
        if signal.is_empty() {
            return Ok(Vec::new());
        }
        let stride = self.stride();
        let padded = signal.len().div_ceil(stride) * stride;
        let mut x = signal.to_vec();
        x.resize(padded, T::zero());
        self.reset_state();
        let y = self.forward(&Tensor::from_vec(&[1, padded], x)?, Mode::Eval)?;
        self.reset_state();
        let mut y = y.into_vec();
        y.truncate(signal.len());
        Ok(y)
    }

    /// Names of all persistent arrays (parameters then buffers), in visit order.
    pub fn array_names(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |n, _| names.push(n.to_string()));
        self.visit_buffers("", &mut |n, _| names.push(n.to_string()));
        names
    }
}

impl<T: Real> Layer<T> for Tcrn<T> {
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Tcrn::forward(self, input, mode)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>> {
        Tcrn::backward(self, grad_output)
    }

    fn reset_state(&mut self) {
        Tcrn::reset_state(self)
    }
}

impl<T: Real> Parameterized<T> for Tcrn<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&crate::layers::join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_buffers(&crate::layers::join(prefix, &format!("block{i}")), f);
        }
    }
}
