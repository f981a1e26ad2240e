use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Corpus, Manifest};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Tcrn;
use crate::tensor::Real;

/// What produces the "TCRN" column.
pub enum Enhancer<'a, T> {
    Model(&'a mut Tcrn<T>),
    /// The clean reference itself; an upper bound and a sanity check.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub clean_id: String,
    pub noise_id: String,
    pub snr_db: f64,
    pub mixture: MetricsReport,
    pub enhanced: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalGroup {
    pub noise_id: String,
    pub snr_db: f64,
    pub count: usize,
    pub mixture: MetricsReport,
    pub enhanced: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub missing: Vec<PathBuf>,
}

/// Score every manifest entry: mixture vs clean and enhanced vs clean.
/// Entries whose files are absent are listed in `missing` and skipped.
pub fn evaluate<T: Real>(mut enhancer: Enhancer<'_, T>, manifest: Manifest) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::Data("manifest has no entries".into()));
    }
    let (corpus, missing) = Corpus::load_available(manifest)?;
    if corpus.is_empty() {
        return Err(Error::Data(format!("none of the manifest's files exist ({} missing)", missing.len())));
    }
    let mut rows = Vec::with_capacity(corpus.len());
    for i in 0..corpus.len() {
        let (noisy, clean) = corpus.pair(i)?;
        let e = &corpus.manifest.entries[i];
        let enhanced: Vec<f32> = match &mut enhancer {
            Enhancer::Oracle => clean.clone(),
            Enhancer::Model(m) => {
                let x: Vec<T> = noisy.iter().map(|&v| T::of(v as f64)).collect();
                m.enhance(&x)?.into_iter().map(|v| v.as_f64() as f32).collect()
            }
        };
        rows.push(EvalRow {
            index: i,
            clean_id: e.clean_id.clone(),
            noise_id: e.noise_id.clone(),
            snr_db: e.snr_db,
            mixture: MetricsReport::compute(&clean, &noisy, 16_000)?,
            enhanced: MetricsReport::compute(&clean, &enhanced, 16_000)?,
        });
    }
    Ok(EvalReport { rows, missing })
}

fn metric_cells(m: &MetricsReport, e: &MetricsReport) -> String {
    format!(
        "{:.2}\t{:.2}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
        m.stoi_percent(),
        e.stoi_percent(),
        m.si_snr_db,
        e.si_snr_db,
        m.seg_snr_db,
        e.seg_snr_db
    )
}

impl EvalReport {
    pub fn mean_mixture(&self) -> MetricsReport {
        MetricsReport::mean(&self.rows.iter().map(|r| r.mixture).collect::<Vec<_>>())
    }

    pub fn mean_enhanced(&self) -> MetricsReport {
        MetricsReport::mean(&self.rows.iter().map(|r| r.enhanced).collect::<Vec<_>>())
    }

    /// Means per (noise, SNR) condition, sorted.
    pub fn groups(&self) -> Vec<EvalGroup> {
        let mut map: BTreeMap<(String, i64), Vec<&EvalRow>> = BTreeMap::new();
        for r in &self.rows {
            // SNRs are keyed in millidecibels so they sort numerically.
            let key = (r.noise_id.clone(), (r.snr_db * 1000.0).round() as i64);
            map.entry(key).or_default().push(r);
        }
        map.into_values()
            .map(|rows| EvalGroup {
                noise_id: rows[0].noise_id.clone(),
                snr_db: rows[0].snr_db,
                count: rows.len(),
                mixture: MetricsReport::mean(&rows.iter().map(|r| r.mixture).collect::<Vec<_>>()),
                enhanced: MetricsReport::mean(&rows.iter().map(|r| r.enhanced).collect::<Vec<_>>()),
            })
            .collect()
    }

    /// One line per file, raw values.
    pub fn per_file_tsv(&self) -> String {
        let mut s = String::from(
            "index\tclean\tnoise\tsnr_db\tmix_si_snr\tmix_seg_snr\tmix_stoi\ttcrn_si_snr\ttcrn_seg_snr\ttcrn_stoi\n",
        );
        for r in &self.rows {
            let (m, e) = (&r.mixture, &r.enhanced);
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.index, r.clean_id, r.noise_id, r.snr_db, m.si_snr_db, m.seg_snr_db, m.stoi, e.si_snr_db, e.seg_snr_db, e.stoi
            );
        }
        s
    }

    /// Rows are noise conditions, columns metric × {Mixture, TCRN}; STOI in percent.
    pub fn table_tsv(&self) -> String {
        let mut s = String::from(
            "noise\tsnr_db\tfiles\tstoi_mixture\tstoi_tcrn\tsi_snr_mixture\tsi_snr_tcrn\tseg_snr_mixture\tseg_snr_tcrn\n",
        );
        for g in self.groups() {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                g.noise_id,
                g.snr_db,
                g.count,
                metric_cells(&g.mixture, &g.enhanced)
            );
        }
        let _ = writeln!(
            s,
            "mean\t-\t{}\t{}",
            self.rows.len(),
            metric_cells(&self.mean_mixture(), &self.mean_enhanced())
        );
        s
    }

    /// Key-value summary with raw means.
    pub fn summary_text(&self) -> String {
        let (m, e) = (self.mean_mixture(), self.mean_enhanced());
        let mut s = String::new();
        let _ = writeln!(s, "files = {}", self.rows.len());
        let _ = writeln!(s, "missing = {}", self.missing.len());
        let _ = writeln!(s, "mixture.si_snr_db = {}", m.si_snr_db);
        let _ = writeln!(s, "mixture.seg_snr_db = {}", m.seg_snr_db);
        let _ = writeln!(s, "mixture.stoi = {}", m.stoi);
        let _ = writeln!(s, "tcrn.si_snr_db = {}", e.si_snr_db);
        let _ = writeln!(s, "tcrn.seg_snr_db = {}", e.seg_snr_db);
        let _ = writeln!(s, "tcrn.stoi = {}", e.stoi);
        s
    }

    /// Write `per_file.tsv`, `table.tsv`, `summary.txt` and, if any, `missing.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("per_file.tsv"), self.per_file_tsv())?;
        fs::write(dir.join("table.tsv"), self.table_tsv())?;
        fs::write(dir.join("summary.txt"), self.summary_text())?;
        if !self.missing.is_empty() {
            let list: String = self.missing.iter().map(|p| format!("{}\n", p.display())).collect();
            fs::write(dir.join("missing.txt"), list)?;
        }
        Ok(())
    }
}
