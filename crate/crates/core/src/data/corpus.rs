use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{list_wavs, read_wav, resample_to_16k};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Batches are zero-padded to a multiple of this many samples.
pub const PAD_MULTIPLE: usize = 160;

pub const MANIFEST_HEADER: &str = "clean_id\tnoise_id\tsnr_db\toffset\tseed";

/// Achieved SNR in dB between a clean signal and a noise signal.
pub fn snr_db<T: Real>(clean: &[T], noise: &[T]) -> f64 {
    let pc: f64 = clean.iter().map(|&v| v.as_f64() * v.as_f64()).sum();
    let pn: f64 = noise.iter().map(|&v| v.as_f64() * v.as_f64()).sum();
    10.0 * (pc / pn).log10()
}

/// Scale the first `clean.len()` samples of `noise` to the requested SNR and
/// add them to `clean`. Returns `(mixture, scaled_noise)`.
pub fn mix_at_snr<T: Real>(clean: &[T], noise: &[T], snr_db: f64) -> Result<(Vec<T>, Vec<T>)> {
    if noise.len() < clean.len() {
        return Err(Error::Data(format!(
            "noise segment ({} samples) is shorter than clean ({})",
            noise.len(),
            clean.len()
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    let noise = &noise[..clean.len()];
    let n = clean.len().max(1) as f64;
    let pc = clean.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>() / n;
    let pn = noise.iter().map(|&v| v.as_f64() * v.as_f64()).sum::<f64>() / n;
    if !(pc > 0.0) || !(pn > 0.0) {
        return Err(Error::Data("cannot mix silent clean or noise signals".into()));
    }
    let g = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<T> = noise.iter().map(|&v| T::of(g * v.as_f64())).collect();
    let mixture = clean.iter().zip(&scaled).map(|(&c, &s)| c + s).collect();
    Ok((mixture, scaled))
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub clean_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub noise_offset: usize,
    pub seed: u64,
}

/// Mixture recipes plus the directories their ids refer to.
///
/// Text form: `# clean_dir = ...` and `# noise_dir = ...` lines, the
/// [`MANIFEST_HEADER`] line, then one tab-separated record per mixture.
/// Ids are file names without the `.wav` extension.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub clean_dir: PathBuf,
    pub noise_dir: PathBuf,
    pub entries: Vec<MixtureSpec>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# clean_dir = {}", self.clean_dir.display());
        let _ = writeln!(s, "# noise_dir = {}", self.noise_dir.display());
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}",
                e.clean_id, e.noise_id, e.snr_db, e.noise_offset, e.seed
            );
        }
        s
    }

    /// Parse manifest text; relative directories resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut dirs = BTreeMap::new();
        let mut entries = Vec::new();
        let mut saw_header = false;
        for (i, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Data(format!("manifest line {}: {what}", i + 1));
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    dirs.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if !saw_header {
                if line.trim() != MANIFEST_HEADER {
                    return Err(bad("expected the header line"));
                }
                saw_header = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            entries.push(MixtureSpec {
                clean_id: f[0].to_string(),
                noise_id: f[1].to_string(),
                snr_db: f[2].parse().map_err(|_| bad("bad snr_db"))?,
                noise_offset: f[3].parse().map_err(|_| bad("bad offset"))?,
                seed: f[4].parse().map_err(|_| bad("bad seed"))?,
            });
        }
        if !saw_header {
            return Err(Error::Data("manifest has no header line".into()));
        }
        let dir = |key: &str| -> Result<PathBuf> {
            let d = dirs
                .get(key)
                .ok_or_else(|| Error::Data(format!("manifest lacks `# {key} = ...`")))?;
            Ok(base.join(d))
        };
        Ok(Manifest {
            clean_dir: dir("clean_dir")?,
            noise_dir: dir("noise_dir")?,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Result of [`build_corpus`]: the manifest and any skipped combinations.
#[derive(Debug, Clone)]
pub struct CorpusBuild {
    pub manifest: Manifest,
    pub diagnostics: Vec<String>,
}

fn file_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_dir(dir: &Path) -> Result<Vec<(String, Vec<f32>)>> {
    let files = list_wavs(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| Ok((file_id(p), resample_to_16k(&read_wav(p)?)?.samples)))
        .collect()
}

/// Per-item seed derived from the corpus seed and the item index (SplitMix64).
fn item_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Enumerate clean × noise × snr × repeat with seeded random noise offsets.
pub fn build_corpus(
    clean_dir: &Path,
    noise_dir: &Path,
    snrs: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<CorpusBuild> {
    if snrs.is_empty() || repeats == 0 {
        return Err(Error::invalid("need at least one SNR and one repeat"));
    }
    let lengths = |dir: &Path| -> Result<Vec<(String, usize)>> {
        Ok(load_dir(dir)?.into_iter().map(|(id, s)| (id, s.len())).collect())
    };
    let clean = lengths(clean_dir)?;
    let noise = lengths(noise_dir)?;
    let mut entries = Vec::new();
    let mut diagnostics = Vec::new();
    let mut index = 0u64;
    for (cid, clen) in &clean {
        for (nid, nlen) in &noise {
            for &snr in snrs {
                for _ in 0..repeats {
                    let s = item_seed(seed, index);
                    index += 1;
                    if nlen < clen {
                        diagnostics.push(format!(
                            "skip {cid} + {nid}: noise has {nlen} samples, clean needs {clen}"
                        ));
                        continue;
                    }
                    let offset = ChaCha8Rng::seed_from_u64(s).gen_range(0..=nlen - clen);
                    entries.push(MixtureSpec {
                        clean_id: cid.clone(),
                        noise_id: nid.clone(),
                        snr_db: snr,
                        noise_offset: offset,
                        seed: s,
                    });
                }
            }
        }
    }
    Ok(CorpusBuild {
        manifest: Manifest {
            clean_dir: fs::canonicalize(clean_dir)?,
            noise_dir: fs::canonicalize(noise_dir)?,
            entries,
        },
        diagnostics,
    })
}

/// All audio referenced by a manifest, loaded at 16 kHz.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    clean: BTreeMap<String, Vec<f32>>,
    noise: BTreeMap<String, Vec<f32>>,
}

impl Corpus {
    pub fn load(manifest: Manifest) -> Result<Self> {
        let (corpus, missing) = Self::load_available(manifest)?;
        match missing.first() {
            Some(path) => Err(Error::Data(format!("missing file {}", path.display()))),
            None => Ok(corpus),
        }
    }

    /// Load what exists. Entries referring to absent files are dropped and
    /// the absent paths returned; unreadable files are still an error.
    pub fn load_available(mut manifest: Manifest) -> Result<(Self, Vec<PathBuf>)> {
        let mut clean = BTreeMap::new();
        let mut noise = BTreeMap::new();
        let mut missing = Vec::new();
        let mut kept = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries.drain(..) {
            let mut ok = true;
            for (map, dir, id) in [
                (&mut clean, &manifest.clean_dir, &e.clean_id),
                (&mut noise, &manifest.noise_dir, &e.noise_id),
            ] {
                if map.contains_key(id) {
                    continue;
                }
                let path = dir.join(format!("{id}.wav"));
                if !path.is_file() {
                    if !missing.contains(&path) {
                        missing.push(path);
                    }
                    ok = false;
                    continue;
                }
                map.insert(id.clone(), resample_to_16k(&read_wav(&path)?)?.samples);
            }
            if ok {
                kept.push(e);
            }
        }
        manifest.entries = kept;
        Ok((Corpus { manifest, clean, noise }, missing))
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn clean(&self, id: &str) -> Option<&[f32]> {
        self.clean.get(id).map(Vec::as_slice)
    }

    /// `(noisy, clean)` for manifest entry `i`.
    pub fn pair(&self, i: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let e = self
            .manifest
            .entries
            .get(i)
            .ok_or_else(|| Error::invalid(format!("no manifest entry {i}")))?;
        let clean = &self.clean[&e.clean_id];
        let noise = &self.noise[&e.noise_id];
        let end = e.noise_offset + clean.len();
        if end > noise.len() {
            return Err(Error::Data(format!(
                "entry {i}: offset {} overruns noise {}",
                e.noise_offset, e.noise_id
            )));
        }
        let (noisy, _) = mix_at_snr(clean, &noise[e.noise_offset..end], e.snr_db)?;
        Ok((noisy, clean.clone()))
    }
}

/// A zero-padded batch of `(noisy, clean)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub noisy: Tensor<T>,
    pub clean: Tensor<T>,
    pub original_lengths: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn padded_len(&self) -> usize {
        self.noisy.shape()[1]
    }

    pub fn size(&self) -> usize {
        self.original_lengths.len()
    }
}

/// Stack pairs, padding with trailing zeros to the smallest multiple of
/// [`PAD_MULTIPLE`] that holds the longest item.
pub fn make_batch<T: Real>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<Batch<T>> {
    if pairs.is_empty() {
        return Err(Error::invalid("cannot batch zero items"));
    }
    for (i, (n, c)) in pairs.iter().enumerate() {
        if n.len() != c.len() || n.is_empty() {
            return Err(Error::shape(format!(
                "item {i}: noisy has {} samples, clean has {}",
                n.len(),
                c.len()
            )));
        }
    }
    let longest = pairs.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
    let t = longest.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let b = pairs.len();
    let mut noisy = vec![T::zero(); b * t];
    let mut clean = vec![T::zero(); b * t];
    for (i, (n, c)) in pairs.iter().enumerate() {
        noisy[i * t..i * t + n.len()].copy_from_slice(n);
        clean[i * t..i * t + c.len()].copy_from_slice(c);
    }
    Ok(Batch {
        noisy: Tensor::from_vec(&[b, t], noisy)?,
        clean: Tensor::from_vec(&[b, t], clean)?,
        original_lengths: pairs.iter().map(|(n, _)| n.len()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_wav, AudioFile, WavFormat};

    #[test]
    fn mixing_gains() {
        let clean = vec![1.0f64, -1.0, 1.0, -1.0];
        let noise = vec![-1.0f64, -1.0, 1.0, 1.0, 7.0];
        let (mix, scaled) = mix_at_snr(&clean, &noise, 0.0).unwrap();
        assert_eq!(scaled, &noise[..4]);
        assert_eq!(mix, vec![0.0, -2.0, 2.0, 0.0]);
        let (_, scaled) = mix_at_snr(&clean, &noise, -5.0).unwrap();
        assert!((scaled[0] + 10f64.powf(0.25)).abs() < 1e-12);
        let (mix, _) = mix_at_snr(&clean, &noise, 200.0).unwrap();
        for (m, c) in mix.iter().zip(&clean) {
            assert!((m - c).abs() < 1e-9);
        }
        assert!(mix_at_snr(&[0.0f64; 4], &noise, 0.0).is_err());
        assert!(mix_at_snr(&clean, &[1.0f64; 3], 0.0).is_err());
    }

    #[test]
    fn batch_padding() {
        let item = |n: usize| (vec![1.0f32; n], vec![2.0f32; n]);
        assert_eq!(make_batch(&[item(170), item(300)]).unwrap().padded_len(), 320);
        assert_eq!(make_batch(&[item(160)]).unwrap().padded_len(), 160);
        let b = make_batch(&[item(161)]).unwrap();
        assert_eq!(b.padded_len(), 320);
        assert_eq!(b.original_lengths, vec![161]);
        assert!(b.noisy.data()[161..].iter().all(|&v| v == 0.0));
        assert!(b.clean.data()[161..].iter().all(|&v| v == 0.0));
        assert!(make_batch::<f32>(&[]).is_err());
    }

    fn fixture(dir: &Path, n_clean: usize, n_noise: usize) {
        for i in 0..n_clean {
            let s = (0..1600 + 160 * i).map(|t| ((t * (i + 3)) as f32 * 0.01).sin()).collect();
            write_wav(&dir.join(format!("clean/c{i}.wav")), &AudioFile::new(s, 16000), WavFormat::Float32)
                .unwrap();
        }
        for i in 0..n_noise {
            let s = (0..4000).map(|t| ((t * (7 + i)) as f32 * 0.37).cos()).collect();
            write_wav(&dir.join(format!("noise/n{i}.wav")), &AudioFile::new(s, 16000), WavFormat::Float32)
                .unwrap();
        }
    }

    #[test]
    fn manifest_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 10, 2);
        let (c, n) = (dir.path().join("clean"), dir.path().join("noise"));
        let a = build_corpus(&c, &n, &[-5.0, 0.0], 2, 7).unwrap();
        assert_eq!(a.manifest.len(), 80);
        assert!(a.diagnostics.is_empty());
        let b = build_corpus(&c, &n, &[-5.0, 0.0], 2, 7).unwrap();
        assert_eq!(a.manifest.to_text(), b.manifest.to_text());
        let other = build_corpus(&c, &n, &[-5.0, 0.0], 2, 8).unwrap();
        assert_ne!(a.manifest.to_text(), other.manifest.to_text());

        let path = dir.path().join("m.tsv");
        a.manifest.write(&path).unwrap();
        assert_eq!(Manifest::read(&path).unwrap(), a.manifest);
        assert!(a.manifest.to_text().lines().nth(2) == Some(MANIFEST_HEADER));

        let corpus = Corpus::load(a.manifest.clone()).unwrap();
        let (noisy, clean) = corpus.pair(3).unwrap();
        let e = &a.manifest.entries[3];
        let noise: Vec<f32> = noisy.iter().zip(&clean).map(|(x, y)| x - y).collect();
        assert!((snr_db(&clean, &noise) - e.snr_db).abs() < 1e-3);
    }

    #[test]
    fn single_line_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 1, 1);
        let (c, n) = (dir.path().join("clean"), dir.path().join("noise"));
        assert_eq!(build_corpus(&c, &n, &[0.0], 1, 1).unwrap().manifest.len(), 1);

        let short = AudioFile::new(vec![0.5; 100], 16000);
        write_wav(&n.join("short.wav"), &short, WavFormat::Float32).unwrap();
        let b = build_corpus(&c, &n, &[0.0], 1, 1).unwrap();
        assert_eq!(b.manifest.len(), 1);
        assert_eq!(b.diagnostics.len(), 1);

        let empty = dir.path().join("empty");
        fs::create_dir_all(&empty).unwrap();
        assert!(build_corpus(&empty, &n, &[0.0], 1, 1).is_err());
    }

    #[test]
    fn manifest_parse_errors() {
        assert!(Manifest::parse("", Path::new(".")).is_err());
        let text = format!("# clean_dir = c\n# noise_dir = n\n{MANIFEST_HEADER}\na\tb\tx\t0\t1\n");
        assert!(Manifest::parse(&text, Path::new(".")).is_err());
        let text = format!("{MANIFEST_HEADER}\n");
        assert!(Manifest::parse(&text, Path::new(".")).is_err());
    }
}
