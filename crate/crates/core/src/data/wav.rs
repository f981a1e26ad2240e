use std::fs;
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// A mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFile {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_path: Option<PathBuf>,
    /// Non-fatal conditions met while reading, e.g. dropped channels.
    pub warnings: Vec<String>,
}

impl AudioFile {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        AudioFile {
            samples,
            sample_rate,
            source_path: None,
            warnings: Vec::new(),
        }
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> Error + '_ {
    move |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    }
}

/// Read a PCM-16 or float-32 WAV file. Multi-channel input keeps channel 0.
pub fn read_wav(path: &Path) -> Result<AudioFile> {
    let mut reader = WavReader::open(path).map_err(wav_err(path))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        (fmt, bits) => {
            return Err(Error::Data(format!(
                "{}: unsupported codec ({fmt:?}, {bits} bits); expected PCM-16 or float-32",
                path.display()
            )))
        }
    };
    let mut warnings = Vec::new();
    let samples = if channels > 1 {
        warnings.push(format!(
            "{}: {channels} channels, keeping channel 0",
            path.display()
        ));
        interleaved.iter().step_by(channels).copied().collect()
    } else {
        interleaved
    };
    Ok(AudioFile {
        samples,
        sample_rate: spec.sample_rate,
        source_path: Some(path.to_path_buf()),
        warnings,
    })
}

/// Write a mono WAV. PCM-16 output rounds `x * 32768` and saturates.
pub fn write_wav(path: &Path, audio: &AudioFile, format: WavFormat) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut writer = WavWriter::create(path, spec).map_err(wav_err(path))?;
    for &s in &audio.samples {
        match format {
            WavFormat::Pcm16 => {
                let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)
            }
            WavFormat::Float32 => writer.write_sample(s),
        }
        .map_err(wav_err(path))?;
    }
    writer.finalize().map_err(wav_err(path))
}

/// `*.wav` files directly inside `dir`, sorted by name.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))? {
        let path = entry?.path();
        let is_wav = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
