//! Waveform loss, normalized STFT-magnitude loss, and their weighted combination.
//!
//! ```text
//! l_we   = mean((s - ŝ)²)
//! l_mag  = ‖|S(s)| - |S(ŝ)|‖_F / ‖|S(s)|‖_F
//! l_comb = l_we + alpha · (l_mag_short + l_mag_long) / 2
//! ```
//!
//! Before an STFT both signals are zero-padded at the end so that the frame
//! grid covers every sample (and at least one full window).

use std::fmt;

use crate::dsp::{Stft, StftSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub short_window: usize,
    pub long_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            short_window: 320,
            long_window: 2560,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.short_window < 2 || self.long_window < 2 {
            return Err(Error::invalid("loss windows must be >= 2 samples"));
        }
        Ok(())
    }

    pub fn short_spec(&self) -> StftSpec {
        StftSpec::hann(self.short_window)
    }

    pub fn long_spec(&self) -> StftSpec {
        StftSpec::hann(self.long_window)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_we: f64,
    pub l_mag_short: f64,
    pub l_mag_long: f64,
    pub l_comb: f64,
}

impl LossReport {
    pub fn assemble(alpha: f64, l_we: f64, l_mag_short: f64, l_mag_long: f64) -> Self {
        LossReport {
            l_we,
            l_mag_short,
            l_mag_long,
            l_comb: l_we + alpha * (l_mag_short + l_mag_long) / 2.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_we, self.l_mag_short, self.l_mag_long, self.l_comb]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Mean of several reports, term by term.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.l_we += r.l_we / n;
            out.l_mag_short += r.l_mag_short / n;
            out.l_mag_long += r.l_mag_long / n;
            out.l_comb += r.l_comb / n;
        }
        out
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "l_comb {:.6} (l_we {:.6}, l_mag_short {:.6}, l_mag_long {:.6})",
            self.l_comb, self.l_we, self.l_mag_short, self.l_mag_long
        )
    }
}

fn check_lengths<T>(s: &[T], s_hat: &[T]) -> Result<()> {
    if s.len() != s_hat.len() {
        return Err(Error::shape(format!(
            "reference has {} samples, estimate has {}",
            s.len(),
            s_hat.len()
        )));
    }
    if s.is_empty() {
        return Err(Error::invalid("empty signal"));
    }
    Ok(())
}

pub fn waveform_loss<T: Real>(s: &[T], s_hat: &[T]) -> Result<T> {
    Ok(waveform_loss_grad(s, s_hat)?.0)
}

/// Waveform loss and its gradient w.r.t. `s_hat`.
pub fn waveform_loss_grad<T: Real>(s: &[T], s_hat: &[T]) -> Result<(T, Vec<T>)> {
    check_lengths(s, s_hat)?;
    let n = T::of(s.len() as f64);
    let two_n = T::of(2.0) / n;
    let mut sum = T::zero();
    let grad = s
        .iter()
        .zip(s_hat)
        .map(|(&a, &b)| {
            let d = b - a;
            sum += d * d;
            two_n * d
        })
        .collect();
    Ok((sum / n, grad))
}

/// Length after end-padding so that STFT frames cover all `len` samples.
pub fn stft_padded_len(len: usize, window: usize, hop: usize) -> usize {
    if len <= window {
        window
    } else {
        window + (len - window).div_ceil(hop) * hop
    }
}

/// Normalized STFT-magnitude loss at one resolution.
#[derive(Debug, Clone)]
pub struct MagnitudeLoss<T> {
    stft: Stft<T>,
}

impl<T: Real> MagnitudeLoss<T> {
    pub fn new(spec: StftSpec) -> Result<Self> {
        Ok(MagnitudeLoss {
            stft: Stft::new(spec)?,
        })
    }

    pub fn spec(&self) -> &StftSpec {
        self.stft.spec()
    }

    fn padded(&self, x: &[T]) -> Vec<T> {
        let spec = self.stft.spec();
        let mut v = x.to_vec();
        v.resize(stft_padded_len(x.len(), spec.fft_size(), spec.hop), T::zero());
        v
    }

    pub fn value(&self, s: &[T], s_hat: &[T]) -> Result<T> {
        Ok(self.eval(s, s_hat, false)?.0)
    }

    /// Loss and gradient w.r.t. `s_hat`.
    pub fn value_grad(&self, s: &[T], s_hat: &[T]) -> Result<(T, Vec<T>)> {
        let (v, g) = self.eval(s, s_hat, true)?;
        Ok((v, g.expect("gradient requested")))
    }

    fn eval(&self, s: &[T], s_hat: &[T], want_grad: bool) -> Result<(T, Option<Vec<T>>)> {
        check_lengths(s, s_hat)?;
        let a = self.stft.forward(&self.padded(s))?;
        let b = self.stft.forward(&self.padded(s_hat))?;
        let den = a.magnitude.iter().map(|&v| v * v).sum::<T>().sqrt();
        if den <= T::zero() {
            return Err(Error::invalid(
                "STFT-magnitude loss is undefined for an all-zero reference",
            ));
        }
        let num = a
            .magnitude
            .iter()
            .zip(&b.magnitude)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            .sqrt();
        let value = num / den;
        if !want_grad {
            return Ok((value, None));
        }
        let mut grad = if num > T::zero() {
            let c = (num * den).recip();
            let g_mag: Vec<T> = a
                .magnitude
                .iter()
                .zip(&b.magnitude)
                .map(|(&x, &y)| (y - x) * c)
                .collect();
            self.stft.backward(&b, &g_mag)
        } else {
            vec![T::zero(); b.signal_len]
        };
        grad.truncate(s.len());
        Ok((value, Some(grad)))
    }
}

/// Convenience wrapper building the STFT on the fly.
pub fn stft_mag_loss<T: Real>(s: &[T], s_hat: &[T], window: usize, hop: usize) -> Result<T> {
    let spec = StftSpec {
        hop,
        ..StftSpec::hann(window)
    };
    MagnitudeLoss::new(spec)?.value(s, s_hat)
}

/// The combined loss with both STFT resolutions prepared once.
#[derive(Debug, Clone)]
pub struct CombinedLoss<T> {
    config: LossConfig,
    short: MagnitudeLoss<T>,
    long: MagnitudeLoss<T>,
}

impl<T: Real> CombinedLoss<T> {
    pub fn new(config: LossConfig) -> Result<Self> {
        config.validate()?;
        Ok(CombinedLoss {
            short: MagnitudeLoss::new(config.short_spec())?,
            long: MagnitudeLoss::new(config.long_spec())?,
            config,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    pub fn report(&self, s: &[T], s_hat: &[T]) -> Result<LossReport> {
        let l_we = waveform_loss(s, s_hat)?.as_f64();
        let short = self.short.value(s, s_hat)?.as_f64();
        let long = self.long.value(s, s_hat)?.as_f64();
        Ok(LossReport::assemble(self.config.alpha, l_we, short, long))
    }

    /// Report plus the gradient of `l_comb` w.r.t. `s_hat`.
    pub fn report_grad(&self, s: &[T], s_hat: &[T]) -> Result<(LossReport, Vec<T>)> {
        let (l_we, mut grad) = waveform_loss_grad(s, s_hat)?;
        let (short, long) = if self.config.alpha > 0.0 {
            let w = T::of(self.config.alpha / 2.0);
            let (vs, gs) = self.short.value_grad(s, s_hat)?;
            let (vl, gl) = self.long.value_grad(s, s_hat)?;
            for ((g, &a), &b) in grad.iter_mut().zip(&gs).zip(&gl) {
                *g += w * (a + b);
            }
            (vs, vl)
        } else {
            (self.short.value(s, s_hat)?, self.long.value(s, s_hat)?)
        };
        let report = LossReport::assemble(self.config.alpha, l_we.as_f64(), short.as_f64(), long.as_f64());
        Ok((report, grad))
    }

    /// Mean per-utterance loss over a padded `[B, T]` batch, each item
    /// restricted to its original length. The gradient is zero on padding.
    pub fn batch(
        &self,
        clean: &Tensor<T>,
        estimate: &Tensor<T>,
        lengths: &[usize],
        want_grad: bool,
    ) -> Result<(LossReport, Option<Tensor<T>>)> {
        let (b, t) = clean.dims2()?;
        estimate.expect_shape(&[b, t])?;
        if lengths.len() != b || lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::shape(format!(
                "lengths {lengths:?} do not fit a batch of {b} x {t}"
            )));
        }
        let mut reports = Vec::with_capacity(b);
        let mut grad = want_grad.then(|| Tensor::zeros(&[b, t]));
        let inv_b = T::of(1.0 / b as f64);
        for (i, &len) in lengths.iter().enumerate() {
            let s = &clean.data()[i * t..i * t + len];
            let e = &estimate.data()[i * t..i * t + len];
            match grad.as_mut() {
                Some(g) => {
                    let (r, gi) = self.report_grad(s, e)?;
                    for (d, v) in g.data_mut()[i * t..i * t + len].iter_mut().zip(gi) {
                        *d = v * inv_b;
                    }
                    reports.push(r);
                }
                None => reports.push(self.report(s, e)?),
            }
        }
        Ok((LossReport::mean(&reports), grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::layers::testutil::random;

    fn speechy(n: usize, seed: u64) -> Vec<f64> {
        let noise = random(&[n], seed).into_vec();
        (0..n)
            .map(|t| (t as f64 * 0.07).sin() + 0.3 * (t as f64 * 0.31).cos() + 0.1 * noise[t])
            .collect()
    }

    #[test]
    fn waveform_examples() {
        assert_eq!(waveform_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(waveform_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        let (s, e) = (speechy(101, 1), speechy(101, 2));
        let mut naive = 0.0;
        for i in 0..101 {
            naive += (s[i] - e[i]).powi(2);
        }
        assert!((waveform_loss(&s, &e).unwrap() - naive / 101.0).abs() < 1e-12);
        assert!(waveform_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn magnitude_loss_examples() {
        let s = speechy(800, 3);
        assert_eq!(stft_mag_loss(&s, &s, 320, 160).unwrap(), 0.0);
        let zero = vec![0.0; 800];
        assert!((stft_mag_loss(&s, &zero, 320, 160).unwrap() - 1.0).abs() < 1e-12);
        for c in [0.5, 2.0] {
            let scaled: Vec<f64> = s.iter().map(|v| c * v).collect();
            let l = stft_mag_loss(&s, &scaled, 320, 160).unwrap();
            assert!((l - (1.0f64 - c).abs()).abs() < 1e-12, "c={c}: {l}");
        }
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert!(stft_mag_loss(&s, &neg, 320, 160).unwrap() < 1e-12);
        assert!(waveform_loss(&s, &neg).unwrap() > 0.0);
        assert!(stft_mag_loss(&zero, &s, 320, 160).is_err());
    }

    #[test]
    fn padding_rule() {
        assert_eq!(stft_padded_len(100, 320, 160), 320);
        assert_eq!(stft_padded_len(320, 320, 160), 320);
        assert_eq!(stft_padded_len(321, 320, 160), 480);
        assert_eq!(stft_padded_len(16000, 2560, 1280), 16640);
    }

    #[test]
    fn combined_arithmetic() {
        let r = LossReport::assemble(0.1, 0.02, 0.4, 0.6);
        assert!((r.l_comb - 0.07).abs() < 1e-15);
        let s = speechy(700, 4);
        let e = speechy(700, 5);
        let loss = CombinedLoss::<f64>::new(LossConfig { alpha: 0.0, ..LossConfig::default() }).unwrap();
        let r = loss.report(&s, &e).unwrap();
        assert_eq!(r.l_comb, r.l_we);
        let full = CombinedLoss::<f64>::new(LossConfig::default()).unwrap();
        let r = full.report(&s, &s).unwrap();
        assert_eq!(r, LossReport::default());
    }

    #[test]
    fn combined_gradient() {
        let cfg = LossConfig {
            alpha: 0.7,
            short_window: 16,
            long_window: 64,
        };
        let loss = CombinedLoss::<f64>::new(cfg).unwrap();
        let s = speechy(90, 6);
        let e = Tensor::vector(&speechy(90, 7));
        let (_, grad) = loss.report_grad(&s, e.data()).unwrap();
        let report = finite_diff_check(
            |x| Ok(loss.report(&s, x.data())?.l_comb),
            &e,
            &Tensor::vector(&grad),
            1e-5,
            90,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn batch_matches_per_item() {
        let cfg = LossConfig {
            alpha: 0.1,
            short_window: 16,
            long_window: 64,
        };
        let loss = CombinedLoss::<f64>::new(cfg).unwrap();
        let (a, b) = (speechy(80, 1), speechy(50, 2));
        let (ea, eb) = (speechy(80, 3), speechy(50, 4));
        let mut clean = vec![0.0; 160];
        let mut est = vec![0.0; 160];
        clean[..80].copy_from_slice(&a);
        clean[80..130].copy_from_slice(&b);
        est[..80].copy_from_slice(&ea);
        est[80..130].copy_from_slice(&eb);
        est[150] = 9.0;
        let clean = Tensor::from_vec(&[2, 80], clean).unwrap();
        let est = Tensor::from_vec(&[2, 80], est).unwrap();
        let (r, g) = loss.batch(&clean, &est, &[80, 50], true).unwrap();
        let want = LossReport::mean(&[loss.report(&a, &ea).unwrap(), loss.report(&b, &eb).unwrap()]);
        assert!((r.l_comb - want.l_comb).abs() < 1e-12);
        let g = g.unwrap();
        assert!(g.data()[130..].iter().all(|&v| v == 0.0));
    }
}
