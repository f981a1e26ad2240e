use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::parse_key_values;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{TcrbConfig, TcrnConfig};
use crate::optim::AdamConfig;
use crate::tensor::DType;

/// Everything a training run needs. Built from defaults, then a key-value
/// file, then individual overrides; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: TcrnConfig,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Random training crop in samples; 0 trains on whole utterances.
    pub crop: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: u64,
    pub valid_fraction: f64,
    pub seed: u64,
    pub precision: DType,
    pub manifest: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    /// Desk-scale settings sized for the synthetic corpus.
    fn default() -> Self {
        RunConfig {
            model: TcrnConfig {
                n_blocks: 2,
                block: TcrbConfig {
                    channels: 64,
                    lstm_hidden: 64,
                    ..TcrbConfig::default()
                },
                sample_rate: 16_000,
            },
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            clip_norm: 0.0,
            batch_size: 8,
            crop: 8000,
            epochs: 20,
            max_steps: 0,
            valid_fraction: 0.1,
            seed: 0,
            precision: DType::F32,
            manifest: None,
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

pub const KEYS: [&str; 24] = [
    "n_blocks",
    "channels",
    "kernel_size",
    "stride",
    "lstm_hidden",
    "window",
    "sample_rate",
    "alpha",
    "short_window",
    "long_window",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "clip_norm",
    "batch_size",
    "crop",
    "epochs",
    "max_steps",
    "valid_fraction",
    "seed",
    "precision",
    "manifest",
    "run_dir",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Set one key. Keys use snake_case; kebab-case is accepted too.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let v = value.trim();
        let b = &mut self.model.block;
        match key.as_str() {
            "n_blocks" => self.model.n_blocks = parse(&key, v)?,
            "channels" => b.channels = parse(&key, v)?,
            "kernel_size" => b.kernel_size = parse(&key, v)?,
            "stride" => b.stride = parse(&key, v)?,
            "lstm_hidden" => b.lstm_hidden = parse(&key, v)?,
            "window" => b.window = v.parse()?,
            "sample_rate" => self.model.sample_rate = parse(&key, v)?,
            "alpha" => self.loss.alpha = parse(&key, v)?,
            "short_window" => self.loss.short_window = parse(&key, v)?,
            "long_window" => self.loss.long_window = parse(&key, v)?,
            "lr" => self.adam.lr = parse(&key, v)?,
            "beta1" => self.adam.beta1 = parse(&key, v)?,
            "beta2" => self.adam.beta2 = parse(&key, v)?,
            "eps" => self.adam.eps = parse(&key, v)?,
            "clip_norm" => self.clip_norm = parse(&key, v)?,
            "batch_size" => self.batch_size = parse(&key, v)?,
            "crop" => self.crop = parse(&key, v)?,
            "epochs" => self.epochs = parse(&key, v)?,
            "max_steps" => self.max_steps = parse(&key, v)?,
            "valid_fraction" => self.valid_fraction = parse(&key, v)?,
            "seed" => self.seed = parse(&key, v)?,
            "precision" => self.precision = v.parse()?,
            "manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "run_dir" => self.run_dir = PathBuf::from(v),
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults, then `file` (if any), then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::invalid(format!("config {}: {e}", path.display())))?;
            c.apply_text(&text)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.adam.validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2 (batch norm)"));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::invalid("valid_fraction must be in [0, 1)"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::invalid("clip_norm must be >= 0"));
        }
        Ok(())
    }

    /// The fully resolved configuration as key-value text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        let l = &self.loss;
        let a = &self.adam;
        let _ = writeln!(s, "alpha = {}", l.alpha);
        let _ = writeln!(s, "short_window = {}", l.short_window);
        let _ = writeln!(s, "long_window = {}", l.long_window);
        let _ = writeln!(s, "lr = {}", a.lr);
        let _ = writeln!(s, "beta1 = {}", a.beta1);
        let _ = writeln!(s, "beta2 = {}", a.beta2);
        let _ = writeln!(s, "eps = {}", a.eps);
        let _ = writeln!(s, "clip_norm = {}", self.clip_norm);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "max_steps = {}", self.max_steps);
        let _ = writeln!(s, "valid_fraction = {}", self.valid_fraction);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "precision = {}", self.precision.name());
        let manifest = self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "manifest = {manifest}");
        let _ = writeln!(s, "run_dir = {}", self.run_dir.display());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("lr", "0.0005").unwrap();
        c.set("max-steps", "17").unwrap();
        c.set("manifest", "corpus/train.tsv").unwrap();
        c.set("precision", "f64").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        // every documented key is echoed
        let text = c.to_text();
        for k in KEYS {
            assert!(text.contains(&format!("{k} = ")), "{k}");
        }
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nepochs = 3\nseed = 9\n").unwrap();
        let c = RunConfig::resolve(Some(&path), &[("seed".into(), "4".into())]).unwrap();
        assert_eq!((c.epochs, c.seed), (3, 4));

        fs::write(&path, "epochz = 3\n").unwrap();
        assert!(RunConfig::resolve(Some(&path), &[]).is_err());
        assert!(RunConfig::resolve(None, &[("batch_size".into(), "1".into())]).is_err());
        assert!(RunConfig::resolve(None, &[("stride".into(), "100".into())]).is_err());
    }
}
