//! Signal-processing primitives shared by the layers and the losses.
//!
//! "Convolution" throughout is cross-correlation: frame `j` of the output
//! reads input samples `[j*stride, j*stride + kernel_size)` of the
//! (left-padded) input, with no kernel flip.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// `0.5 * (1 - cos(2πt/L))`, `t in [0, L)`. Constant overlap-add at hop `L/2`.
    HannPeriodic,
    /// `0.5 * (1 - cos(2πt/(L-1)))`, endpoints both zero.
    HannSymmetric,
    Rectangular,
}

impl WindowKind {
    pub fn name(self) -> &'static str {
        match self {
            WindowKind::HannPeriodic => "hann_periodic",
            WindowKind::HannSymmetric => "hann_symmetric",
            WindowKind::Rectangular => "rectangular",
        }
    }
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hann_periodic" | "hann" => Ok(WindowKind::HannPeriodic),
            "hann_symmetric" => Ok(WindowKind::HannSymmetric),
            "rectangular" | "rect" => Ok(WindowKind::Rectangular),
            other => Err(Error::invalid(format!("unknown window kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub kind: WindowKind,
    pub length: usize,
}

impl WindowSpec {
    pub fn hann(length: usize) -> Self {
        WindowSpec {
            kind: WindowKind::HannPeriodic,
            length,
        }
    }

    pub fn rectangular(length: usize) -> Self {
        WindowSpec {
            kind: WindowKind::Rectangular,
            length,
        }
    }
}

pub fn make_window<T: Real>(spec: &WindowSpec) -> Result<Tensor<T>> {
    Ok(Tensor::vector(&window_values::<T>(spec)?))
}

pub(crate) fn window_values<T: Real>(spec: &WindowSpec) -> Result<Vec<T>> {
    let len = spec.length;
    if len < 2 {
        return Err(Error::invalid(format!("window length {len} < 2")));
    }
    let values = match spec.kind {
        WindowKind::HannPeriodic => (0..len)
            .map(|t| 0.5 * (1.0 - (2.0 * PI * t as f64 / len as f64).cos()))
            .collect::<Vec<_>>(),
        WindowKind::HannSymmetric => (0..len)
            .map(|t| 0.5 * (1.0 - (2.0 * PI * t as f64 / (len - 1) as f64).cos()))
            .collect(),
        WindowKind::Rectangular => vec![1.0; len],
    };
    Ok(values.into_iter().map(T::of).collect())
}

/// Shape and framing of a 1-D (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_size: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Zeros prepended to the input of a forward convolution.
    pub causal_left_pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel_size: usize, stride: usize, in_channels: usize, out_channels: usize) -> Self {
        ConvGeometry {
            kernel_size,
            stride,
            in_channels,
            out_channels,
            causal_left_pad: 0,
        }
    }

    pub fn with_left_pad(mut self, pad: usize) -> Self {
        self.causal_left_pad = pad;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if self.kernel_size < self.stride {
            return Err(Error::invalid(format!(
                "kernel_size {} < stride {}",
                self.kernel_size, self.stride
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("channel counts must be >= 1"));
        }
        Ok(())
    }

    /// Overlap is even (no checkerboard) iff the kernel is a multiple of the stride.
    pub fn is_even_overlap(&self) -> bool {
        self.kernel_size % self.stride == 0
    }

    /// Number of frames produced from `len` input samples, or `None` if the
    /// padded input is shorter than one kernel.
    pub fn output_frames(&self, len: usize) -> Option<usize> {
        let padded = len + self.causal_left_pad;
        (padded >= self.kernel_size).then(|| (padded - self.kernel_size) / self.stride + 1)
    }

    /// Length of a transposed convolution over `frames` frames.
    pub fn deconv_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.stride + self.kernel_size
        }
    }
}

// Raw kernels on row-major slices. All accumulate into `out`.

/// `out[o, j] += Σ_c Σ_t w[o, c, t] · x[c, j*stride + t]`.
///
/// `x` is `[cin, x_len]`, `w` is `[cout, cin, m]`, `out` is `[cout, frames]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate<T: Real>(
    x: &[T],
    cin: usize,
    x_len: usize,
    w: &[T],
    cout: usize,
    m: usize,
    stride: usize,
    frames: usize,
    out: &mut [T],
) {
    debug_assert!(frames == 0 || (frames - 1) * stride + m <= x_len);
    for o in 0..cout {
        let out_row = &mut out[o * frames..(o + 1) * frames];
        for c in 0..cin {
            let w_row = &w[(o * cin + c) * m..(o * cin + c + 1) * m];
            let x_row = &x[c * x_len..(c + 1) * x_len];
            for (j, acc) in out_row.iter_mut().enumerate() {
                let start = j * stride;
                *acc += dot(w_row, &x_row[start..start + m]);
            }
        }
    }
}

/// `out[o, j*stride + t] += Σ_c h[c, j] · w[c, o, t]` (overlap-add).
///
/// `h` is `[cin, frames]`, `w` is `[cin, cout, m]`, `out` is `[cout, out_len]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scatter<T: Real>(
    h: &[T],
    cin: usize,
    frames: usize,
    w: &[T],
    cout: usize,
    m: usize,
    stride: usize,
    out: &mut [T],
    out_len: usize,
) {
    debug_assert!(frames == 0 || (frames - 1) * stride + m <= out_len);
    for o in 0..cout {
        let out_row = &mut out[o * out_len..(o + 1) * out_len];
        for c in 0..cin {
            let w_row = &w[(c * cout + o) * m..(c * cout + o + 1) * m];
            let h_row = &h[c * frames..(c + 1) * frames];
            for (j, &hj) in h_row.iter().enumerate() {
                if hj != T::zero() {
                    let start = j * stride;
                    axpy(hj, w_row, &mut out_row[start..start + m]);
                }
            }
        }
    }
}

/// `dw[a, b, t] += Σ_j g[a, j] · x[b, j*stride + t]`.
///
/// `g` is `[ca, frames]`, `x` is `[cb, x_len]`, `dw` is `[ca, cb, m]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad<T: Real>(
    g: &[T],
    ca: usize,
    frames: usize,
    x: &[T],
    cb: usize,
    x_len: usize,
    m: usize,
    stride: usize,
    dw: &mut [T],
) {
    for a in 0..ca {
        let g_row = &g[a * frames..(a + 1) * frames];
        for b in 0..cb {
            let x_row = &x[b * x_len..(b + 1) * x_len];
            let dw_row = &mut dw[(a * cb + b) * m..(a * cb + b + 1) * m];
            for (j, &gj) in g_row.iter().enumerate() {
                if gj != T::zero() {
                    let start = j * stride;
                    axpy(gj, &x_row[start..start + m], dw_row);
                }
            }
        }
    }
}

/// Prepend `pad` zeros to each channel of a `[channels, len]` signal.
pub(crate) fn left_pad<T: Real>(x: &[T], channels: usize, len: usize, pad: usize) -> Vec<T> {
    if pad == 0 {
        return x.to_vec();
    }
    let padded = len + pad;
    let mut out = vec![T::zero(); channels * padded];
    for c in 0..channels {
        out[c * padded + pad..(c + 1) * padded].copy_from_slice(&x[c * len..(c + 1) * len]);
    }
    out
}

fn check_kernels<T: Real>(kernels: &Tensor<T>, a: usize, b: usize, geom: &ConvGeometry) -> Result<()> {
    kernels.expect_shape(&[a, b, geom.kernel_size])
}

/// Plain 1-D convolution of a `[in_ch, T]` signal with `[out_ch, in_ch, m]` kernels.
pub fn conv1d<T: Real>(input: &Tensor<T>, kernels: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    geom.validate()?;
    let (cin, len) = input.dims2()?;
    if cin != geom.in_channels {
        return Err(Error::shape(format!(
            "input has {cin} channels, geometry expects {}",
            geom.in_channels
        )));
    }
    check_kernels(kernels, geom.out_channels, cin, geom)?;
    let frames = geom.output_frames(len).ok_or_else(|| {
        Error::invalid(format!(
            "input of {len} samples (+{} pad) is shorter than one {}-sample frame",
            geom.causal_left_pad, geom.kernel_size
        ))
    })?;
    let padded = left_pad(input.data(), cin, len, geom.causal_left_pad);
    let mut out = vec![T::zero(); geom.out_channels * frames];
    correlate(
        &padded,
        cin,
        len + geom.causal_left_pad,
        kernels.data(),
        geom.out_channels,
        geom.kernel_size,
        geom.stride,
        frames,
        &mut out,
    );
    Tensor::from_vec(&[geom.out_channels, frames], out)
}

/// Kernel-windowed convolution: `conv1d` with effective kernel `W(t)·k(t)`.
pub fn windowed_conv1d<T: Real>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    window: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let effective = apply_window(kernels, window, geom.kernel_size)?;
    conv1d(input, &effective, geom)
}

/// Multiply the last axis of `kernels` by `window`.
pub fn apply_window<T: Real>(kernels: &Tensor<T>, window: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    if window.len() != m || kernels.shape().last() != Some(&m) {
        return Err(Error::shape(format!(
            "window of length {} does not match kernel length {m}",
            window.len()
        )));
    }
    let mut out = kernels.clone();
    for row in out.data_mut().chunks_exact_mut(m) {
        for (k, &w) in row.iter_mut().zip(window.data()) {
            *k *= w;
        }
    }
    Ok(out)
}

/// Transposed convolution (overlap-add) of `[in_ch, J]` frames with
/// `[in_ch, out_ch, m]` kernels, producing `(J-1)*stride + m` samples.
///
/// `causal_left_pad` is ignored here; callers trim as needed.
pub fn deconv1d<T: Real>(h: &Tensor<T>, kernels: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    geom.validate()?;
    let (cin, frames) = h.dims2()?;
    if cin != geom.in_channels {
        return Err(Error::shape(format!(
            "frames have {cin} channels, geometry expects {}",
            geom.in_channels
        )));
    }
    check_kernels(kernels, cin, geom.out_channels, geom)?;
    let out_len = geom.deconv_len(frames);
    let mut out = vec![T::zero(); geom.out_channels * out_len];
    scatter(
        h.data(),
        cin,
        frames,
        kernels.data(),
        geom.out_channels,
        geom.kernel_size,
        geom.stride,
        &mut out,
        out_len,
    );
    Tensor::from_vec(&[geom.out_channels, out_len], out)
}

/// Sum of squared shifted windows `Σ_j W²(p - j*stride)`, clamped to `[lo, hi]`.
pub fn sum_square_envelope<T: Real>(
    window: &Tensor<T>,
    stride: usize,
    n_frames: usize,
    clamp_lo: f64,
    clamp_hi: f64,
) -> Result<Tensor<T>> {
    if clamp_lo <= 0.0 || clamp_hi < clamp_lo {
        return Err(Error::invalid(format!(
            "envelope clamp [{clamp_lo}, {clamp_hi}] must satisfy 0 < lo <= hi"
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let m = window.len();
    let len = if n_frames == 0 { 0 } else { (n_frames - 1) * stride + m };
    let mut env = vec![T::zero(); len];
    for j in 0..n_frames {
        for (t, &w) in window.data().iter().enumerate() {
            env[j * stride + t] += w * w;
        }
    }
    let (lo, hi) = (T::of(clamp_lo), T::of(clamp_hi));
    for e in env.iter_mut() {
        *e = e.max(lo).min(hi);
    }
    Ok(Tensor::vector(&env))
}

/// STFT framing: windowed DFT of length `window.length` every `hop` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftSpec {
    pub window: WindowSpec,
    pub hop: usize,
}

impl StftSpec {
    /// Periodic Hann window with a half-window hop.
    pub fn hann(fft_size: usize) -> Self {
        StftSpec {
            window: WindowSpec::hann(fft_size),
            hop: (fft_size / 2).max(1),
        }
    }

    pub fn fft_size(&self) -> usize {
        self.window.length
    }

    pub fn bins(&self) -> usize {
        self.window.length / 2 + 1
    }

    pub fn frames(&self, len: usize) -> Option<usize> {
        (len >= self.fft_size()).then(|| (len - self.fft_size()) / self.hop + 1)
    }
}

/// Fixed-weight convolution that computes STFT magnitudes and their adjoint.
///
/// The kernel bank has `2 * bins` rows: windowed cosine atoms followed by
/// windowed negative-sine atoms, so channel `k` is `Re X_k` and channel
/// `bins + k` is `Im X_k`.
#[derive(Debug, Clone)]
pub struct Stft<T> {
    spec: StftSpec,
    basis: Vec<T>,
}

/// Cached forward quantities needed by [`Stft::backward`].
#[derive(Debug, Clone)]
pub struct StftFrames<T> {
    /// `[2 * bins, frames]`
    pub re_im: Vec<T>,
    /// `[bins, frames]`
    pub magnitude: Vec<T>,
    pub frames: usize,
    pub signal_len: usize,
}

impl<T: Real> Stft<T> {
    pub fn new(spec: StftSpec) -> Result<Self> {
        if spec.hop == 0 {
            return Err(Error::invalid("STFT hop must be >= 1"));
        }
        let n = spec.fft_size();
        let window = window_values::<f64>(&spec.window)?;
        let bins = spec.bins();
        let mut basis = vec![T::zero(); 2 * bins * n];
        for k in 0..bins {
            for (t, &w) in window.iter().enumerate() {
                // Reduce k*t mod n in integers to keep the phase exact.
                let angle = 2.0 * PI * ((k * t) % n) as f64 / n as f64;
                basis[k * n + t] = T::of(w * angle.cos());
                basis[(bins + k) * n + t] = T::of(-w * angle.sin());
            }
        }
        Ok(Stft { spec, basis })
    }

    pub fn spec(&self) -> &StftSpec {
        &self.spec
    }

    pub fn forward(&self, signal: &[T]) -> Result<StftFrames<T>> {
        let n = self.spec.fft_size();
        let frames = self.spec.frames(signal.len()).ok_or_else(|| {
            Error::invalid(format!(
                "signal of {} samples is shorter than one {n}-sample STFT window",
                signal.len()
            ))
        })?;
        let bins = self.spec.bins();
        let mut re_im = vec![T::zero(); 2 * bins * frames];
        correlate(signal, 1, signal.len(), &self.basis, 2 * bins, n, self.spec.hop, frames, &mut re_im);
        let mut magnitude = vec![T::zero(); bins * frames];
        for k in 0..bins {
            for j in 0..frames {
                let re = re_im[k * frames + j];
                let im = re_im[(bins + k) * frames + j];
                magnitude[k * frames + j] = (re * re + im * im).sqrt();
            }
        }
        Ok(StftFrames {
            re_im,
            magnitude,
            frames,
            signal_len: signal.len(),
        })
    }

    /// Gradient w.r.t. the signal given the gradient w.r.t. the magnitudes.
    /// Bins with exactly zero magnitude contribute zero (subgradient).
    pub fn backward(&self, cache: &StftFrames<T>, grad_magnitude: &[T]) -> Vec<T> {
        let bins = self.spec.bins();
        let frames = cache.frames;
        let mut grad_re_im = vec![T::zero(); 2 * bins * frames];
        for k in 0..bins {
            for j in 0..frames {
                let mag = cache.magnitude[k * frames + j];
                if mag > T::zero() {
                    let g = grad_magnitude[k * frames + j] / mag;
                    grad_re_im[k * frames + j] = g * cache.re_im[k * frames + j];
                    grad_re_im[(bins + k) * frames + j] = g * cache.re_im[(bins + k) * frames + j];
                }
            }
        }
        let mut grad = vec![T::zero(); cache.signal_len];
        scatter(
            &grad_re_im,
            2 * bins,
            frames,
            &self.basis,
            1,
            self.spec.fft_size(),
            self.spec.hop,
            &mut grad,
            cache.signal_len,
        );
        grad
    }
}

/// `|STFT(s)|` as a `[bins, frames]` tensor.
pub fn stft_magnitude<T: Real>(signal: &Tensor<T>, spec: &StftSpec) -> Result<Tensor<T>> {
    if signal.rank() != 1 {
        return Err(Error::shape(format!("expected a 1-D signal, got {:?}", signal.shape())));
    }
    let stft = Stft::new(*spec)?;
    let out = stft.forward(signal.data())?;
    Tensor::from_vec(&[spec.bins(), out.frames], out.magnitude)
}
