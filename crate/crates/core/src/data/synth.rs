//! Deterministic speech-like and noise signals for desk-scale experiments.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_wav, AudioFile, WavFormat, TARGET_RATE};
use crate::error::Result;

const CLEAN_SECS: (f64, f64) = (1.0, 2.0);
const NOISE_SECS: f64 = 3.0;

/// Voiced, syllabic signal: 3–5 harmonics of a drifting pitch plus weak
/// breath noise, under a 3–6 Hz syllabic envelope with a -20 dB floor,
/// peak-normalized to 0.5.
pub fn speech_like(len: usize, rng: &mut impl Rng) -> Vec<f32> {
    let sr = TARGET_RATE as f64;
    let n_harm = rng.gen_range(3..=5);
    let f0 = rng.gen_range(100.0..220.0);
    let glide = rng.gen_range(-0.25..0.25);
    let vib_rate = rng.gen_range(3.0..6.0);
    let vib_depth = rng.gen_range(0.02..0.06);
    let syl_rate = rng.gen_range(3.0..6.0);
    let syl_phase = rng.gen_range(0.0..2.0 * PI);
    let amps: Vec<f64> = (1..=n_harm)
        .map(|h| rng.gen_range(0.6..1.0) / h as f64)
        .collect();
    let breath = 0.15 * (amps.iter().map(|a| a * a).sum::<f64>() / 2.0).sqrt();
    let normal = Normal::new(0.0, breath).expect("valid normal");
    let dur = len as f64 / sr;
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let time = t as f64 / sr;
        let f = f0 * (1.0 + glide * time / dur) * (1.0 + vib_depth * (2.0 * PI * vib_rate * time).sin());
        phase += 2.0 * PI * f / sr;
        let voiced: f64 = amps
            .iter()
            .enumerate()
            .map(|(h, a)| a * ((h + 1) as f64 * phase).sin())
            .sum();
        let s = (2.0 * PI * syl_rate * time + syl_phase).sin();
        let env = 0.1 + 0.9 * s.max(0.0).powf(0.7);
        out.push((voiced + normal.sample(rng)) * env);
    }
    normalize(&mut out, 0.5)
}

/// Nonstationary noise: Gaussian noise through a random two-pole resonator,
/// plus a little white noise, under a slow random amplitude modulation.
pub fn textured_noise(len: usize, rng: &mut impl Rng) -> Vec<f32> {
    let sr = TARGET_RATE as f64;
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let centre = rng.gen_range(300.0..4000.0);
    let r = rng.gen_range(0.85..0.97);
    let (a1, a2) = (2.0 * r * (2.0 * PI * centre / sr).cos(), -r * r);
    let white_mix = rng.gen_range(0.05..0.3);
    let am_rate = rng.gen_range(0.5..3.0);
    let am_depth = rng.gen_range(0.3..0.8);
    let (mut y1, mut y2) = (0.0, 0.0);
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let e: f64 = normal.sample(rng);
        let y = e + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        let am = 1.0 + am_depth * (2.0 * PI * am_rate * t as f64 / sr).sin();
        out.push(am * ((1.0 - r) * y + white_mix * normal.sample(rng)));
    }
    normalize(&mut out, 0.5)
}

fn normalize(x: &mut [f64], peak: f64) -> Vec<f32> {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if m > 0.0 { peak / m } else { 0.0 };
    x.iter().map(|v| (v * g) as f32).collect()
}

/// Paths written by [`synth_corpus`].
#[derive(Debug, Clone)]
pub struct SynthSummary {
    pub clean_dir: PathBuf,
    pub noise_dir: PathBuf,
    pub clean: Vec<PathBuf>,
    pub noise: Vec<PathBuf>,
}

/// Write `n_utts` clean and `n_utts` noise files under `dir/clean` and `dir/noise`.
pub fn synth_corpus(dir: &Path, n_utts: usize, seed: u64) -> Result<SynthSummary> {
    synth_corpus_with(dir, n_utts, n_utts, seed)
}

/// Float-32, 16 kHz WAVs: clean files of 1–2 s and noise files of 3 s.
pub fn synth_corpus_with(dir: &Path, n_clean: usize, n_noise: usize, seed: u64) -> Result<SynthSummary> {
    let sr = TARGET_RATE as f64;
    let clean_dir = dir.join("clean");
    let noise_dir = dir.join("noise");
    std::fs::create_dir_all(&clean_dir)?;
    std::fs::create_dir_all(&noise_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clean = Vec::new();
    for i in 0..n_clean {
        let len = (rng.gen_range(CLEAN_SECS.0..=CLEAN_SECS.1) * sr) as usize;
        let path = clean_dir.join(format!("clean_{i:03}.wav"));
        write_wav(&path, &AudioFile::new(speech_like(len, &mut rng), TARGET_RATE), WavFormat::Float32)?;
        clean.push(path);
    }
    let mut noise = Vec::new();
    for i in 0..n_noise {
        let path = noise_dir.join(format!("noise_{i:03}.wav"));
        let len = (NOISE_SECS * sr) as usize;
        write_wav(&path, &AudioFile::new(textured_noise(len, &mut rng), TARGET_RATE), WavFormat::Float32)?;
        noise.push(path);
    }
    Ok(SynthSummary {
        clean_dir,
        noise_dir,
        clean,
        noise,
    })
}
