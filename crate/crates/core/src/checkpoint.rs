//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TCRN"                magic
//! u32                   format version
//! u32 + bytes           UTF-8 header, one `key = value` per line
//! u32                   array count
//! per array:
//!   u16 + bytes         name (parameter path, or adam.m/<path>, adam.v/<path>)
//!   u8                  dtype (0 = f32, 1 = f64)
//!   u8                  rank
//!   rank × u64          dims
//!   raw                 IEEE-754 values
//! 32 bytes              SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::model::{Tcrn, TcrnConfig};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TCRN";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: Tcrn<T>,
    pub optimizer: Option<Adam<T>>,
    pub step: u64,
    /// Header entries not consumed by the model or optimizer.
    pub extra: BTreeMap<String, String>,
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn dtype_from_code(c: u8) -> Result<DType> {
    match c {
        0 => Ok(DType::F32),
        1 => Ok(DType::F64),
        _ => Err(Error::Checkpoint(format!("unknown dtype code {c}"))),
    }
}

fn put_array<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype_code(T::DTYPE));
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serialize a model, optional optimizer state, step counter and extra header entries.
pub fn to_bytes<T: Real>(
    model: &mut Tcrn<T>,
    optimizer: Option<&Adam<T>>,
    step: u64,
    extra: &BTreeMap<String, String>,
) -> Vec<u8> {
    let mut header = String::new();
    for (k, v) in model.config().to_pairs() {
        header.push_str(&format!("{k} = {v}\n"));
    }
    header.push_str(&format!("step = {step}\n"));
    header.push_str(&format!("dtype = {}\n", T::DTYPE.name()));
    if let Some(opt) = optimizer {
        let c = opt.config;
        header.push_str(&format!(
            "adam.lr = {:e}\nadam.beta1 = {:e}\nadam.beta2 = {:e}\nadam.eps = {:e}\nadam.t = {}\n",
            c.lr,
            c.beta1,
            c.beta2,
            c.eps,
            opt.steps()
        ));
    }
    for (k, v) in extra {
        header.push_str(&format!("{k} = {v}\n"));
    }

    let mut body = Vec::new();
    let mut count = 0u32;
    model.visit_params("", &mut |name, p| {
        put_array(&mut body, name, &p.value);
        count += 1;
    });
    model.visit_buffers("", &mut |name, b| {
        put_array(&mut body, name, b);
        count += 1;
    });
    if let Some(opt) = optimizer {
        for (name, s) in opt.state() {
            put_array(&mut body, &format!("{ADAM_M}{name}"), &s.m);
            put_array(&mut body, &format!("{ADAM_V}{name}"), &s.v);
            count += 2;
        }
    }

    let mut out = Vec::with_capacity(body.len() + header.len() + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Write atomically: a temporary sibling file is renamed over `path`.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &mut Tcrn<T>,
    optimizer: Option<&Adam<T>>,
    step: u64,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let bytes = to_bytes(model, optimizer, step, extra);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
        .map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let name_len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let dtype = dtype_from_code(self.u8()?)?;
        let rank = self.u8()? as usize;
        if !(1..=3).contains(&rank) {
            return Err(Error::Checkpoint(format!("{name}: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(
                usize::try_from(self.u64()?)
                    .map_err(|_| Error::Checkpoint(format!("{name}: dimension overflow")))?,
            );
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: dimension overflow")))?;
        let size = dtype.size();
        let raw = self.take(
            n.checked_mul(size)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: dimension overflow")))?,
        )?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

/// Parse `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint("truncated".into()));
    }
    let (bytes, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(bytes).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let mut header = parse_key_values(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config = TcrnConfig::from_pairs(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let count = r.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.array::<T>()?;
        if arrays.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate array {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }

    let mut model = Tcrn::<T>::new(config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut problem: Option<Error> = None;
    let mut fill = |name: &str, dst: &mut Tensor<T>| {
        if problem.is_some() {
            return;
        }
        match arrays.remove(name) {
            None => problem = Some(Error::Checkpoint(format!("missing array {name}"))),
            Some(src) if src.shape() != dst.shape() => {
                problem = Some(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match config shape {:?}",
                    src.shape(),
                    dst.shape()
                )))
            }
            Some(src) => *dst = src,
        }
    };
    model.visit_params("", &mut |name, p| fill(name, &mut p.value));
    model.visit_buffers("", &mut |name, b| fill(name, b));
    if let Some(e) = problem {
        return Err(e);
    }

    let mut known = Vec::new();
    model.visit_params("", &mut |name, p| known.push((name.to_string(), p.value.shape().to_vec())));
    let shapes: BTreeMap<_, _> = known.into_iter().collect();

    let mut state = BTreeMap::new();
    for (name, m) in std::mem::take(&mut arrays) {
        if let Some(path) = name.strip_prefix(ADAM_M) {
            let want = shapes
                .get(path)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter {path}")))?;
            if m.shape() != want.as_slice() {
                return Err(Error::Checkpoint(format!("{name}: shape mismatch")));
            }
            state.insert(path.to_string(), (Some(m), None));
        } else if let Some(path) = name.strip_prefix(ADAM_V) {
            let e = state.entry(path.to_string()).or_insert((None, None));
            e.1 = Some(m);
        } else {
            return Err(Error::Checkpoint(format!("unexpected array {name}")));
        }
    }
    let mut moments = BTreeMap::new();
    for (path, pair) in state {
        match pair {
            (Some(m), Some(v)) if m.shape() == v.shape() => {
                moments.insert(path, Moments { m, v });
            }
            _ => return Err(Error::Checkpoint(format!("incomplete optimizer state for {path}"))),
        }
    }

    let step = take_parse(&mut header, "step")?.unwrap_or(0);
    let optimizer = if header.contains_key("adam.lr") {
        let config = AdamConfig {
            lr: take_parse(&mut header, "adam.lr")?.unwrap_or_default(),
            beta1: take_parse(&mut header, "adam.beta1")?.unwrap_or_default(),
            beta2: take_parse(&mut header, "adam.beta2")?.unwrap_or_default(),
            eps: take_parse(&mut header, "adam.eps")?.unwrap_or_default(),
        };
        let t = take_parse(&mut header, "adam.t")?.unwrap_or(0);
        Some(Adam::from_parts(config, t, moments).map_err(|e| Error::Checkpoint(e.to_string()))?)
    } else if !moments.is_empty() {
        return Err(Error::Checkpoint("optimizer arrays without optimizer header".into()));
    } else {
        None
    };
    for (k, _) in config.to_pairs() {
        header.remove(k);
    }
    header.remove("dtype");
    Ok(Checkpoint {
        model,
        optimizer,
        step,
        extra: header,
    })
}

fn take_parse<V: std::str::FromStr>(header: &mut BTreeMap<String, String>, key: &str) -> Result<Option<V>> {
    match header.remove(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Error::Checkpoint(format!("bad header value `{v}` for {key}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::WindowKind;
    use crate::layers::testutil::random;
    use crate::layers::Mode;
    use crate::model::TcrbConfig;

    fn tiny() -> TcrnConfig {
        TcrnConfig {
            n_blocks: 2,
            block: TcrbConfig {
                channels: 4,
                kernel_size: 8,
                stride: 4,
                lstm_hidden: 4,
                window: WindowKind::HannPeriodic,
            },
            sample_rate: 16_000,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut model = Tcrn::<f32>::new(tiny(), 9).unwrap();
        let x = random(&[2, 32], 3).cast::<f32>();
        model.forward(&x, Mode::Train).unwrap();
        let before = model.forward(&x, Mode::Eval).unwrap();

        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        model.visit_params("", &mut |_, p| p.grad.fill(0.5));
        opt.step(&mut model).unwrap();
        model.reset_state();
        let before_after_step = model.forward(&x, Mode::Eval).unwrap();
        assert_ne!(before, before_after_step);

        let mut extra = BTreeMap::new();
        extra.insert("epoch".to_string(), "3".to_string());
        let bytes = to_bytes(&mut model, Some(&opt), 42, &extra);
        let mut ck = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(ck.step, 42);
        assert_eq!(ck.extra.get("epoch").map(String::as_str), Some("3"));
        assert_eq!(ck.optimizer.as_ref(), Some(&opt));
        model.reset_state();
        ck.model.reset_state();
        assert_eq!(
            ck.model.forward(&x, Mode::Eval).unwrap(),
            model.forward(&x, Mode::Eval).unwrap()
        );
        assert_eq!(to_bytes(&mut ck.model, ck.optimizer.as_ref(), 42, &extra), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Tcrn::<f64>::new(tiny(), 1).unwrap();
        save_checkpoint(&path, &mut model, None, 7, &BTreeMap::new()).unwrap();
        let ck = load_checkpoint::<f64>(&path).unwrap();
        assert!(ck.optimizer.is_none());
        assert_eq!(ck.step, 7);
        assert_eq!(ck.model.config(), model.config());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut model = Tcrn::<f32>::new(tiny(), 1).unwrap();
        let good = to_bytes(&mut model, None, 0, &BTreeMap::new());

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bad_magic), Err(Error::Checkpoint(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        assert!(matches!(from_bytes::<f32>(&bad_version), Err(Error::Checkpoint(_))));

        for cut in [3, 10, good.len() / 2, good.len() - 1] {
            assert!(from_bytes::<f32>(&good[..cut]).is_err(), "cut {cut}");
        }
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(from_bytes::<f32>(&trailing).is_err());
        // A single flipped bit anywhere in the payload is caught.
        for at in [20, good.len() / 2, good.len() - 40] {
            let mut flipped = good.clone();
            flipped[at] ^= 1;
            assert!(matches!(from_bytes::<f32>(&flipped), Err(Error::Checkpoint(_))), "byte {at}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut model = Tcrn::<f32>::new(tiny(), 1).unwrap();
        let bytes = to_bytes(&mut model, None, 0, &BTreeMap::new());
        let find = |key: &[u8]| bytes.windows(key.len()).position(|w| w == key).unwrap() + key.len() - 1;
        // Same-length header edit: the config says 5 channels, the arrays hold 4.
        let mut edited = bytes[..bytes.len() - DIGEST_LEN].to_vec();
        for key in [&b"\nchannels = 4"[..], b"lstm_hidden = 4"] {
            edited[find(key)] = b'5';
        }
        let digest = Sha256::digest(&edited);
        edited.extend_from_slice(&digest);
        let err = from_bytes::<f32>(&edited).unwrap_err();
        assert!(err.to_string().contains("does not match config shape"), "{err}");
    }

    #[test]
    fn loads_across_precision() {
        let mut model = Tcrn::<f32>::new(tiny(), 4).unwrap();
        let bytes = to_bytes(&mut model, None, 0, &BTreeMap::new());
        let ck = from_bytes::<f64>(&bytes).unwrap();
        let mut back = ck.model.clone();
        let mut a = Vec::new();
        let mut b = Vec::new();
        model.visit_params("", &mut |_, p| a.extend(p.value.data().iter().map(|&v| v as f64)));
        back.visit_params("", &mut |_, p| b.extend_from_slice(p.value.data()));
        assert_eq!(a, b);
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\n a = 1 \n\nb=x y\n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "x y");
        assert!(parse_key_values("novalue").is_err());
    }
}
