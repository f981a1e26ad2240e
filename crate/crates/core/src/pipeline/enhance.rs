use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{list_wavs, read_wav, resample_to_16k, write_wav, AudioFile, WavFormat};
use crate::error::{Error, Result};
use crate::model::Tcrn;
use crate::tensor::Real;

pub const DEFAULT_SUFFIX: &str = "_enhanced";

#[derive(Debug, Clone, Default)]
pub struct EnhanceReport {
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Enhance one file into `out_dir/<stem><suffix>.wav` (float-32).
pub fn enhance_file<T: Real>(
    model: &mut Tcrn<T>,
    input: &Path,
    out_dir: &Path,
    suffix: &str,
    report: &mut EnhanceReport,
) -> Result<PathBuf> {
    let mut audio = read_wav(input)?;
    report.warnings.append(&mut audio.warnings);
    let rate = model.config().sample_rate;
    if audio.sample_rate != rate {
        if rate != 16_000 {
            return Err(Error::Data(format!(
                "{}: {} Hz input for a {rate} Hz model",
                input.display(),
                audio.sample_rate
            )));
        }
        report.warnings.push(format!(
            "{}: resampled from {} Hz to {rate} Hz",
            input.display(),
            audio.sample_rate
        ));
        audio = resample_to_16k(&audio)?;
    }
    let x: Vec<T> = audio.samples.iter().map(|&v| T::of(v as f64)).collect();
    let y = model.enhance(&x)?;
    let out = AudioFile::new(y.iter().map(|v| v.as_f64() as f32).collect(), rate);
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let path = out_dir.join(format!("{stem}{suffix}.wav"));
    write_wav(&path, &out, WavFormat::Float32)?;
    report.outputs.push(path.clone());
    Ok(path)
}

/// Enhance a single WAV or every WAV in a directory.
pub fn enhance_path<T: Real>(model: &mut Tcrn<T>, input: &Path, out_dir: &Path, suffix: &str) -> Result<EnhanceReport> {
    let inputs = if input.is_dir() {
        list_wavs(input)?
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(Error::Data(format!("{} does not exist", input.display())));
    };
    if inputs.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", input.display())));
    }
    fs::create_dir_all(out_dir)?;
    let mut report = EnhanceReport::default();
    for path in &inputs {
        enhance_file(model, path, out_dir, suffix, &mut report)?;
    }
    Ok(report)
}
