//! Objective quality measures: SI-SNR, segmental SNR and STOI.

use std::f64::consts::PI;
use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::resample;
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const SI_SNR_CAP_DB: f64 = 100.0;
pub const SEG_SNR_RANGE_DB: (f64, f64) = (-10.0, 35.0);
pub const SEG_FRAME: usize = 320;
pub const SEG_HOP: usize = 160;

fn to_f64<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

fn same_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "reference has {} samples, estimate has {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Scale-invariant SNR in dB, clamped to ±100 dB.
pub fn si_snr<T: Real>(reference: &[T], estimate: &[T]) -> Result<f64> {
    same_len(reference, estimate)?;
    let (r, e) = (to_f64(reference), to_f64(estimate));
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if !(rr > 0.0) {
        return Err(Error::invalid("SI-SNR needs a non-silent reference"));
    }
    let scale = r.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut residual) = (0.0, 0.0);
    for (a, b) in r.iter().zip(&e) {
        let t = scale * a;
        target += t * t;
        residual += (b - t) * (b - t);
    }
    let db = 10.0 * (target / residual).log10();
    Ok(if db.is_nan() { -SI_SNR_CAP_DB } else { db.clamp(-SI_SNR_CAP_DB, SI_SNR_CAP_DB) })
}

/// Mean per-frame SNR over 320-sample frames with a 160-sample hop, each
/// frame clamped to [-10, 35] dB.
pub fn seg_snr<T: Real>(reference: &[T], estimate: &[T]) -> Result<f64> {
    same_len(reference, estimate)?;
    if reference.len() < SEG_FRAME {
        return Err(Error::invalid(format!(
            "segmental SNR needs at least {SEG_FRAME} samples"
        )));
    }
    let (r, e) = (to_f64(reference), to_f64(estimate));
    let frames = (r.len() - SEG_FRAME) / SEG_HOP + 1;
    let (lo, hi) = SEG_SNR_RANGE_DB;
    let mut total = 0.0;
    for j in 0..frames {
        let span = j * SEG_HOP..j * SEG_HOP + SEG_FRAME;
        let signal: f64 = r[span.clone()].iter().map(|v| v * v).sum();
        let noise: f64 = r[span.clone()]
            .iter()
            .zip(&e[span])
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let db = if noise == 0.0 {
            hi
        } else {
            (10.0 * (signal / noise).log10()).clamp(lo, hi)
        };
        total += db;
    }
    Ok(total / frames as f64)
}

/// Short-time objective intelligibility.
pub mod stoi_consts {
    pub const FS: u32 = 10_000;
    pub const N_FRAME: usize = 256;
    pub const NFFT: usize = 512;
    pub const NUM_BANDS: usize = 15;
    pub const MIN_FREQ: f64 = 150.0;
    /// Frames per analysis segment (384 ms).
    pub const N: usize = 30;
    /// Lower signal-to-distortion bound in dB.
    pub const BETA: f64 = -15.0;
    pub const DYN_RANGE: f64 = 40.0;
}

use stoi_consts::*;

const EPS: f64 = f64::EPSILON;

/// Hann window of length `n` without its zero end points.
fn stoi_window(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

/// Drop frames more than `DYN_RANGE` dB below the loudest reference frame
/// and overlap-add the remaining windowed frames.
fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hop = N_FRAME / 2;
    let w = stoi_window(N_FRAME);
    let starts: Vec<usize> = (0..x.len().saturating_sub(N_FRAME)).step_by(hop).collect();
    let frame = |s: &[f64], i: usize| -> Vec<f64> { w.iter().zip(&s[i..i + N_FRAME]).map(|(a, b)| a * b).collect() };
    let xf: Vec<Vec<f64>> = starts.iter().map(|&i| frame(x, i)).collect();
    let yf: Vec<Vec<f64>> = starts.iter().map(|&i| frame(y, i)).collect();
    let energy: Vec<f64> = xf
        .iter()
        .map(|f| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..xf.len()).filter(|&i| max - DYN_RANGE - energy[i] < 0.0).collect();
    if keep.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let len = (keep.len() - 1) * hop + N_FRAME;
    let (mut xs, mut ys) = (vec![0.0; len], vec![0.0; len]);
    for (k, &i) in keep.iter().enumerate() {
        for t in 0..N_FRAME {
            xs[k * hop + t] += xf[i][t];
            ys[k * hop + t] += yf[i][t];
        }
    }
    (xs, ys)
}

/// One-third octave band matrix: `NUM_BANDS` rows of 0/1 over `NFFT/2 + 1` bins.
fn third_octave_bands() -> Vec<(usize, usize)> {
    let bins = NFFT / 2 + 1;
    let f: Vec<f64> = (0..bins).map(|k| k as f64 * FS as f64 / NFFT as f64).collect();
    let nearest = |target: f64| -> usize {
        let mut best = 0;
        for (k, &v) in f.iter().enumerate() {
            if (v - target).powi(2) < (f[best] - target).powi(2) {
                best = k;
            }
        }
        best
    };
    (0..NUM_BANDS)
        .map(|i| {
            let k = i as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelopes `[NUM_BANDS][frames]` of a 10 kHz signal.
fn band_envelopes(x: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let hop = N_FRAME / 2;
    let w = stoi_window(N_FRAME);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(NFFT);
    let starts: Vec<usize> = (0..x.len().saturating_sub(N_FRAME)).step_by(hop).collect();
    let mut out = vec![Vec::with_capacity(starts.len()); bands.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); NFFT];
    for &s in &starts {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for t in 0..N_FRAME {
            buf[t].re = w[t] * x[s + t];
        }
        fft.process(&mut buf);
        for (b, &(lo, hi)) in bands.iter().enumerate() {
            let e: f64 = buf[lo..hi].iter().map(|c| c.norm_sqr()).sum();
            out[b].push(e.sqrt());
        }
    }
    out
}

fn centre_and_normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt() + EPS;
    v.iter_mut().for_each(|x| *x /= norm);
}

/// STOI of `estimate` against `reference`, both at `rate` Hz. Returns a raw score.
pub fn stoi<T: Real>(reference: &[T], estimate: &[T], rate: u32) -> Result<f64> {
    same_len(reference, estimate)?;
    let min_len = (0.384 * rate as f64).ceil() as usize;
    if reference.len() < min_len {
        return Err(Error::invalid(format!(
            "STOI needs at least 384 ms of audio ({min_len} samples at {rate} Hz)"
        )));
    }
    let (mut x, mut y) = (to_f64(reference), to_f64(estimate));
    if rate != FS {
        x = resample(&x, rate, FS)?;
        y = resample(&y, rate, FS)?;
    }
    let (x, y) = remove_silent_frames(&x, &y);
    let bands = third_octave_bands();
    let xb = band_envelopes(&x, &bands);
    let yb = band_envelopes(&y, &bands);
    let frames = xb[0].len();
    if frames < N {
        return Err(Error::invalid(format!(
            "only {frames} non-silent frames; STOI needs at least {N}"
        )));
    }
    let clip = 10f64.powf(-BETA / 20.0);
    let mut total = 0.0;
    let segments = frames - N + 1;
    for m in N..=frames {
        for b in 0..NUM_BANDS {
            let xs = &xb[b][m - N..m];
            let ys = &yb[b][m - N..m];
            let xn = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yn = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let alpha = xn / (yn + EPS);
            let mut yp: Vec<f64> = ys
                .iter()
                .zip(xs)
                .map(|(&yv, &xv)| (yv * alpha).min(xv * (1.0 + clip)))
                .collect();
            let mut xp = xs.to_vec();
            centre_and_normalize(&mut yp);
            centre_and_normalize(&mut xp);
            total += xp.iter().zip(&yp).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total / (NUM_BANDS * segments) as f64)
}

/// Scores for one utterance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsReport {
    pub si_snr_db: f64,
    pub seg_snr_db: f64,
    pub stoi: f64,
}

impl MetricsReport {
    pub fn compute<T: Real>(reference: &[T], estimate: &[T], rate: u32) -> Result<Self> {
        Ok(MetricsReport {
            si_snr_db: si_snr(reference, estimate)?,
            seg_snr_db: seg_snr(reference, estimate)?,
            stoi: stoi(reference, estimate, rate)?,
        })
    }

    pub fn stoi_percent(&self) -> f64 {
        100.0 * self.stoi
    }

    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let mut out = MetricsReport::default();
        for r in reports {
            out.si_snr_db += r.si_snr_db / n;
            out.seg_snr_db += r.seg_snr_db / n;
            out.stoi += r.stoi / n;
        }
        out
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "si_snr {:.2} dB, seg_snr {:.2} dB, stoi {:.4} ({:.1}%)",
            self.si_snr_db,
            self.seg_snr_db,
            self.stoi,
            self.stoi_percent()
        )
    }
}
