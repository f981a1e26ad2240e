use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::RunConfig;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{make_batch, Corpus, Manifest};
use crate::error::{Error, Result};
use crate::layers::{Mode, Parameterized};
use crate::loss::{CombinedLoss, LossReport};
use crate::model::Tcrn;
use crate::optim::{clip_grad_norm, grad_norm, Adam};
use crate::tensor::Real;

pub type Pair<T> = (Vec<T>, Vec<T>);

pub const LOSS_LOG_HEADER: &str = "step\tepoch\tl_we\tl_mag_short\tl_mag_long\tl_comb\tgrad_norm";
pub const VALID_LOG_HEADER: &str = "epoch\tstep\tl_we\tl_mag_short\tl_mag_long\tl_comb";

/// One optimizer step's record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossReport,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.step, self.epoch, l.l_we, l.l_mag_short, l.l_mag_long, l.l_comb, self.grad_norm
        )
    }
}

/// Model, optimizer and data for a training run, without any file I/O.
pub struct Trainer<T> {
    pub model: Tcrn<T>,
    pub optimizer: Adam<T>,
    pub loss: CombinedLoss<T>,
    pub config: RunConfig,
    pub train: Vec<Pair<T>>,
    pub valid: Vec<Pair<T>>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Epochs fully completed.
    pub epoch: usize,
}

/// Split items into (train, valid) with a seeded permutation. At least two
/// items always stay in the training set.
pub fn split_pairs<T: Clone>(pairs: Vec<Pair<T>>, fraction: f64, seed: u64) -> (Vec<Pair<T>>, Vec<Pair<T>>) {
    let n = pairs.len();
    let n_valid = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(2));
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut is_valid = vec![false; n];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (p, v) in pairs.into_iter().zip(is_valid) {
        if v {
            valid.push(p);
        } else {
            train.push(p);
        }
    }
    (train, valid)
}

/// Batch index lists for one epoch. A trailing single-item batch joins the
/// previous one, since batch norm needs two items in training mode.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() == 1) {
        let last = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(last);
        }
    }
    batches
}

impl<T: Real> Trainer<T> {
    pub fn new(config: RunConfig, train: Vec<Pair<T>>, valid: Vec<Pair<T>>) -> Result<Self> {
        config.validate()?;
        if train.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 training items, have {}",
                train.len()
            )));
        }
        Ok(Trainer {
            model: Tcrn::new(config.model, config.seed)?,
            optimizer: Adam::new(config.adam)?,
            loss: CombinedLoss::new(config.loss)?,
            config,
            train,
            valid,
            step: 0,
            epoch: 0,
        })
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    fn crop(&self, pair: &Pair<T>, rng: &mut ChaCha8Rng) -> Pair<T> {
        let (n, c) = pair;
        let len = n.len();
        if self.config.crop == 0 || len <= self.config.crop {
            return pair.clone();
        }
        let start = rng.gen_range(0..=len - self.config.crop);
        let end = start + self.config.crop;
        (n[start..end].to_vec(), c[start..end].to_vec())
    }

    /// One update on the given items. The loss is checked before any
    /// parameter changes, so a non-finite value leaves the model untouched.
    pub fn step_on(&mut self, items: &[Pair<T>]) -> Result<StepRecord> {
        let batch = make_batch(items)?;
        self.model.reset_state();
        let estimate = self.model.forward(&batch.noisy, Mode::Train)?;
        let (report, grad) = self.loss.batch(&batch.clean, &estimate, &batch.original_lengths, true)?;
        if !report.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}: {report}", self.step + 1)));
        }
        self.model.zero_grads();
        self.model.backward(&grad.expect("gradient requested"))?;
        let norm = grad_norm(&mut self.model);
        if self.config.clip_norm > 0.0 {
            clip_grad_norm(&mut self.model, self.config.clip_norm)?;
        }
        self.optimizer.step(&mut self.model)?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch: self.epoch + 1,
            loss: report,
            grad_norm: norm,
        })
    }

    /// Run one epoch of shuffled, cropped batches. `on_step` sees every
    /// record as it happens; returning an error aborts the epoch. Stops early
    /// once `max_steps` is reached and returns whether the epoch completed.
    pub fn run_epoch(&mut self, on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<bool> {
        let mut rng = self.epoch_rng(self.epoch);
        let batches = epoch_batches(self.train.len(), self.config.batch_size, &mut rng);
        for idx in batches {
            if self.config.max_steps > 0 && self.step >= self.config.max_steps {
                return Ok(false);
            }
            let items: Vec<Pair<T>> = idx.iter().map(|&i| self.crop(&self.train[i], &mut rng)).collect();
            let record = self.step_on(&items)?;
            on_step(&record)?;
        }
        self.epoch += 1;
        Ok(true)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs || (self.config.max_steps > 0 && self.step >= self.config.max_steps)
    }

    /// Mean eval-mode loss over whole utterances, one at a time.
    pub fn dataset_loss(&mut self, pairs: &[Pair<T>]) -> Result<LossReport> {
        dataset_loss(&mut self.model, &self.loss, pairs)
    }
}

/// Mean eval-mode [`LossReport`] of `model` over `pairs`.
pub fn dataset_loss<T: Real>(model: &mut Tcrn<T>, loss: &CombinedLoss<T>, pairs: &[Pair<T>]) -> Result<LossReport> {
    let mut reports = Vec::with_capacity(pairs.len());
    for (noisy, clean) in pairs {
        let est = model.enhance(noisy)?;
        reports.push(loss.report(clean, &est)?);
    }
    Ok(LossReport::mean(&reports))
}

/// Load every manifest entry as an owned `(noisy, clean)` pair.
pub fn load_pairs<T: Real>(manifest: Manifest) -> Result<Vec<Pair<T>>> {
    if manifest.is_empty() {
        return Err(Error::Data("manifest has no entries".into()));
    }
    let corpus = Corpus::load(manifest)?;
    let cast = |v: Vec<f32>| v.into_iter().map(|x| T::of(x as f64)).collect();
    (0..corpus.len())
        .map(|i| corpus.pair(i).map(|(n, c)| (cast(n), cast(c))))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// What a finished [`train`] call produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub steps: u64,
    pub epochs: usize,
    pub first: Option<StepRecord>,
    pub last: Option<StepRecord>,
    /// Best validation (or epoch-mean training) l_comb seen so far.
    pub best_l_comb: Option<f64>,
}

fn append(path: &Path, header: &str) -> Result<File> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    Ok(f)
}

/// Train from a manifest into `config.run_dir`.
///
/// The run directory receives `config.txt`, `manifest.sha256`, `loss.tsv`
/// (one row per step), `valid.tsv` (one row per epoch), `epoch_NNN.tcrn`
/// (`epoch_000` is the initial model), `last.tcrn` and `best.tcrn`.
/// With `resume`, training continues from `last.tcrn` and appends to the logs.
/// On a non-finite loss the error is returned and existing checkpoints are
/// left as they were.
pub fn train<T: Real>(config: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let manifest_path = config
        .manifest
        .as_ref()
        .ok_or_else(|| Error::invalid("no manifest given"))?;
    let manifest_bytes =
        fs::read(manifest_path).map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest = Manifest::read(manifest_path)?;
    let pairs = load_pairs::<T>(manifest)?;
    let (train_set, valid_set) = split_pairs(pairs, config.valid_fraction, config.seed);

    let dir = &config.run_dir;
    let last_path = dir.join("last.tcrn");
    if last_path.exists() && !resume {
        return Err(Error::invalid(format!(
            "{} already holds a run; resume it or choose another run_dir",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), config.to_text())?;
    fs::write(
        dir.join("manifest.sha256"),
        format!("{}  {}\n", sha256_hex(&manifest_bytes), manifest_path.display()),
    )?;

    let mut trainer = Trainer::new(config.clone(), train_set, valid_set)?;
    let mut best: Option<f64> = None;
    if resume && last_path.exists() {
        let ck = load_checkpoint::<T>(&last_path)?;
        if *ck.model.config() != config.model {
            return Err(Error::invalid("checkpoint architecture differs from the config"));
        }
        trainer.model = ck.model;
        if let Some(opt) = ck.optimizer {
            trainer.optimizer = opt;
        }
        trainer.step = ck.step;
        trainer.epoch = ck.extra.get("epoch").and_then(|v| v.parse().ok()).unwrap_or(0);
        best = ck.extra.get("best_l_comb").and_then(|v| v.parse().ok());
    }

    let extra = |epoch: usize, best: Option<f64>| {
        let mut m = BTreeMap::new();
        m.insert("epoch".to_string(), epoch.to_string());
        if let Some(b) = best {
            m.insert("best_l_comb".to_string(), b.to_string());
        }
        m
    };
    if trainer.step == 0 {
        save_checkpoint(
            &dir.join("epoch_000.tcrn"),
            &mut trainer.model,
            Some(&trainer.optimizer),
            0,
            &extra(0, None),
        )?;
    }

    let mut loss_log = append(&dir.join("loss.tsv"), LOSS_LOG_HEADER)?;
    let mut valid_log = append(&dir.join("valid.tsv"), VALID_LOG_HEADER)?;
    let mut first = None;
    let mut last = None;
    while !trainer.finished() {
        let mut epoch_reports = Vec::new();
        let completed = trainer.run_epoch(&mut |r| {
            writeln!(loss_log, "{}", r.tsv())?;
            first.get_or_insert(*r);
            last = Some(*r);
            epoch_reports.push(r.loss);
            Ok(())
        })?;
        loss_log.flush()?;
        if !completed {
            break;
        }
        let score = if trainer.valid.is_empty() {
            LossReport::mean(&epoch_reports)
        } else {
            let valid = std::mem::take(&mut trainer.valid);
            let r = trainer.dataset_loss(&valid);
            trainer.valid = valid;
            r?
        };
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("validation loss after epoch {}", trainer.epoch)));
        }
        writeln!(
            valid_log,
            "{}\t{}\t{}\t{}\t{}\t{}",
            trainer.epoch, trainer.step, score.l_we, score.l_mag_short, score.l_mag_long, score.l_comb
        )?;
        valid_log.flush()?;
        let improved = best.map_or(true, |b| score.l_comb < b);
        if improved {
            best = Some(score.l_comb);
        }
        let ex = extra(trainer.epoch, best);
        let t = &mut trainer;
        save_checkpoint(
            &dir.join(format!("epoch_{:03}.tcrn", t.epoch)),
            &mut t.model,
            Some(&t.optimizer),
            t.step,
            &ex,
        )?;
        if improved {
            save_checkpoint(&dir.join("best.tcrn"), &mut t.model, Some(&t.optimizer), t.step, &ex)?;
        }
        save_checkpoint(&last_path, &mut t.model, Some(&t.optimizer), t.step, &ex)?;
    }
    // A step limit can end training mid-epoch; keep that state too.
    if !last_path.exists() || last.map_or(false, |r: StepRecord| r.epoch > trainer.epoch) {
        let ex = extra(trainer.epoch, best);
        save_checkpoint(&last_path, &mut trainer.model, Some(&trainer.optimizer), trainer.step, &ex)?;
    }
    Ok(TrainOutcome {
        run_dir: dir.clone(),
        steps: trainer.step,
        epochs: trainer.epoch,
        first,
        last,
        best_l_comb: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_item_tail_joins_previous_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sizes: Vec<usize> = epoch_batches(9, 4, &mut rng).iter().map(Vec::len).collect();
        assert_eq!(sizes, [4, 5]);
        let sizes: Vec<usize> = epoch_batches(10, 4, &mut rng).iter().map(Vec::len).collect();
        assert_eq!(sizes, [4, 4, 2]);
        let mut all: Vec<usize> = epoch_batches(9, 4, &mut rng).concat();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn split_keeps_two_training_items() {
        let pairs: Vec<Pair<f32>> = (0..10).map(|i| (vec![i as f32], vec![0.0])).collect();
        let (t, v) = split_pairs(pairs.clone(), 0.3, 1);
        assert_eq!((t.len(), v.len()), (7, 3));
        let (t2, v2) = split_pairs(pairs.clone(), 0.3, 1);
        assert_eq!((t, v), (t2, v2));
        let (t, v) = split_pairs(pairs[..3].to_vec(), 0.9, 1);
        assert_eq!((t.len(), v.len()), (2, 1));
    }
}
