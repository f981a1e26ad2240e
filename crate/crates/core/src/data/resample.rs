//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc.

use std::f64::consts::PI;

use super::AudioFile;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const TARGET_RATE: u32 = 16_000;
pub const SUPPORTED_RATES: [u32; 5] = [8_000, 16_000, 22_050, 44_100, 48_000];

/// Zero crossings of the sinc on each side of the centre.
const ZERO_CROSSINGS: usize = 32;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.95;
const KAISER_BETA: f64 = 8.6;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Precomputed filter bank for one `from -> to` conversion.
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    half: usize,
    /// `up` phases of `2 * half` taps each.
    taps: Vec<f64>,
}

impl Resampler {
    pub fn new(from: u32, to: u32) -> Result<Self> {
        if from == 0 || to == 0 {
            return Err(Error::invalid("sample rates must be > 0"));
        }
        let g = gcd(from as u64, to as u64);
        let (up, down) = ((to as u64 / g) as usize, (from as u64 / g) as usize);
        if up > 4096 || down > 4096 {
            return Err(Error::invalid(format!(
                "rate ratio {to}/{from} needs too many polyphase branches"
            )));
        }
        // Cutoff in cycles per input sample.
        let fc = 0.5 * ROLLOFF * (up as f64 / down as f64).min(1.0);
        let half = (ZERO_CROSSINGS as f64 / (2.0 * fc)).ceil() as usize;
        let width = half as f64;
        let norm = bessel_i0(KAISER_BETA);
        let mut taps = vec![0.0; up * 2 * half];
        for p in 0..up {
            let frac = p as f64 / up as f64;
            for (i, tap) in taps[p * 2 * half..(p + 1) * 2 * half].iter_mut().enumerate() {
                // Input sample k = i0 + i + 1 - half sits at distance tau from the output instant.
                let tau = frac - (i as f64 + 1.0 - width);
                let r = tau / width;
                if r.abs() >= 1.0 {
                    continue;
                }
                let x = 2.0 * fc * tau;
                let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm;
                *tap = 2.0 * fc * sinc * w;
            }
        }
        Ok(Resampler { up, down, half, taps })
    }

    pub fn ratio(&self) -> (usize, usize) {
        (self.up, self.down)
    }

    /// Output length `ceil(len * up / down)`.
    pub fn output_len(&self, len: usize) -> usize {
        (len * self.up).div_ceil(self.down)
    }

    pub fn process<T: Real>(&self, input: &[T]) -> Vec<T> {
        if self.up == self.down {
            return input.to_vec();
        }
        let n_out = self.output_len(input.len());
        let span = 2 * self.half;
        let mut out = Vec::with_capacity(n_out);
        for n in 0..n_out {
            let pos = n * self.down;
            let (i0, p) = (pos / self.up, pos % self.up);
            let taps = &self.taps[p * span..(p + 1) * span];
            let first = i0 as isize + 1 - self.half as isize;
            let lo = (-first).max(0) as usize;
            let hi = (input.len() as isize - first).clamp(0, span as isize) as usize;
            let mut acc = 0.0;
            for i in lo..hi {
                acc += taps[i] * input[(first + i as isize) as usize].as_f64();
            }
            out.push(T::of(acc));
        }
        out
    }
}

/// Resample between arbitrary rates with a reduced rational ratio.
pub fn resample<T: Real>(samples: &[T], from: u32, to: u32) -> Result<Vec<T>> {
    Ok(Resampler::new(from, to)?.process(samples))
}

/// Bring audio to 16 kHz; 16 kHz input is returned unchanged.
pub fn resample_to_16k(audio: &AudioFile) -> Result<AudioFile> {
    if !SUPPORTED_RATES.contains(&audio.sample_rate) {
        return Err(Error::Data(format!(
            "unsupported sample rate {} Hz (supported: {SUPPORTED_RATES:?})",
            audio.sample_rate
        )));
    }
    if audio.sample_rate == TARGET_RATE {
        return Ok(audio.clone());
    }
    Ok(AudioFile {
        samples: resample(&audio.samples, audio.sample_rate, TARGET_RATE)?,
        sample_rate: TARGET_RATE,
        source_path: audio.source_path.clone(),
        warnings: audio.warnings.clone(),
    })
}
