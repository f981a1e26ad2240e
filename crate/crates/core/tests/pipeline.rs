use std::fs;
use std::path::Path;

use tcrn::checkpoint::{load_checkpoint, save_checkpoint};
use tcrn::data::{build_corpus, read_wav, synth_corpus_with, write_wav, AudioFile, Manifest, WavFormat};
use tcrn::model::{TcrbConfig, Tcrn, TcrnConfig};
use tcrn::pipeline::{enhance_path, evaluate, train, Enhancer, RunConfig, LOSS_LOG_HEADER};
use tcrn::Error;

fn tiny_config(dir: &Path, manifest: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.model = TcrnConfig {
        n_blocks: 1,
        block: TcrbConfig {
            channels: 8,
            lstm_hidden: 8,
            ..TcrbConfig::default()
        },
        sample_rate: 16_000,
    };
    c.batch_size = 4;
    c.crop = 1600;
    c.epochs = 2;
    c.valid_fraction = 0.25;
    c.seed = 3;
    c.manifest = Some(manifest.to_path_buf());
    c.run_dir = dir.join("run");
    c
}

fn corpus(dir: &Path) -> std::path::PathBuf {
    synth_corpus_with(dir, 4, 1, 11).unwrap();
    let b = build_corpus(&dir.join("clean"), &dir.join("noise"), &[-5.0, 0.0], 1, 11).unwrap();
    let path = dir.join("train.tsv");
    b.manifest.write(&path).unwrap();
    path
}

fn log_rows(run: &Path) -> Vec<String> {
    fs::read_to_string(run.join("loss.tsv"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn run_directory_contents_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let mut cfg = tiny_config(dir.path(), &manifest);
    let out = train::<f32>(&cfg, false).unwrap();
    let run = &cfg.run_dir;
    for f in [
        "config.txt",
        "manifest.sha256",
        "loss.tsv",
        "valid.tsv",
        "epoch_000.tcrn",
        "epoch_001.tcrn",
        "epoch_002.tcrn",
        "best.tcrn",
        "last.tcrn",
    ] {
        assert!(run.join(f).is_file(), "{f}");
    }
    // 8 items, 2 held out, batches of 4 -> 4 + 2 per epoch.
    assert_eq!(out.steps, 4);
    assert_eq!(out.epochs, 2);

    // The echoed config reproduces the run configuration.
    let mut echoed = RunConfig::default();
    echoed.apply_text(&fs::read_to_string(run.join("config.txt")).unwrap()).unwrap();
    assert_eq!(echoed, cfg);
    let hash = fs::read_to_string(run.join("manifest.sha256")).unwrap();
    assert_eq!(hash.split_whitespace().next().unwrap().len(), 64);

    // A second fresh run into the same directory is refused.
    assert!(train::<f32>(&cfg, false).is_err());

    cfg.epochs = 3;
    let out = train::<f32>(&cfg, true).unwrap();
    assert_eq!((out.steps, out.epochs), (6, 3));
    let rows = log_rows(run);
    assert_eq!(rows[0], LOSS_LOG_HEADER);
    let steps: Vec<u64> = rows[1..].iter().map(|r| r.split('\t').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, [1, 2, 3, 4, 5, 6]);
    let ck = load_checkpoint::<f32>(&run.join("last.tcrn")).unwrap();
    assert_eq!(ck.step, 6);
    assert_eq!(ck.optimizer.unwrap().steps(), 6);
}

#[test]
fn identical_seed_gives_identical_log_in_f64() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let mut a = tiny_config(dir.path(), &manifest);
    a.precision = tcrn::DType::F64;
    a.epochs = 1;
    let mut b = a.clone();
    a.run_dir = dir.path().join("a");
    b.run_dir = dir.path().join("b");
    train::<f64>(&a, false).unwrap();
    train::<f64>(&b, false).unwrap();
    assert_eq!(log_rows(&a.run_dir), log_rows(&b.run_dir));

    let mut c = a.clone();
    c.seed = 4;
    c.run_dir = dir.path().join("c");
    train::<f64>(&c, false).unwrap();
    assert_ne!(log_rows(&a.run_dir), log_rows(&c.run_dir));
}

#[test]
fn zero_alpha_logs_waveform_loss_only() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let mut cfg = tiny_config(dir.path(), &manifest);
    cfg.loss.alpha = 0.0;
    cfg.epochs = 1;
    train::<f32>(&cfg, false).unwrap();
    for row in &log_rows(&cfg.run_dir)[1..] {
        let f: Vec<&str> = row.split('\t').collect();
        assert_eq!(f[2], f[5], "{row}");
    }
}

#[test]
fn divergence_aborts_and_keeps_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path());
    let mut cfg = tiny_config(dir.path(), &manifest);
    cfg.adam.lr = 1e30;
    cfg.epochs = 5;
    let err = train::<f32>(&cfg, false).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let ck = load_checkpoint::<f32>(&cfg.run_dir.join("epoch_000.tcrn")).unwrap();
    assert_eq!(ck.step, 0);
}

#[test]
fn zero_model_enhances_to_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("in");
    fs::create_dir_all(&inputs).unwrap();
    let a: Vec<f32> = (0..170).map(|i| ((i * 37 % 101) as f32 - 50.0) / 64.0).collect();
    let b: Vec<f32> = (0..3000).map(|i| (i as f32 * 0.01).sin() * 0.3).collect();
    write_wav(&inputs.join("a.wav"), &AudioFile::new(a.clone(), 16_000), WavFormat::Pcm16).unwrap();
    write_wav(&inputs.join("b.wav"), &AudioFile::new(b.clone(), 16_000), WavFormat::Float32).unwrap();

    let mut model = Tcrn::<f32>::zeroed(TcrnConfig::default()).unwrap();
    let ck = dir.path().join("zero.tcrn");
    save_checkpoint(&ck, &mut model, None, 0, &Default::default()).unwrap();
    let mut model = load_checkpoint::<f32>(&ck).unwrap().model;

    let out = dir.path().join("out");
    let report = enhance_path(&mut model, &inputs, &out, "_enh").unwrap();
    assert_eq!(report.outputs.len(), 2);
    let ra = read_wav(&out.join("a_enh.wav")).unwrap();
    let rb = read_wav(&out.join("b_enh.wav")).unwrap();
    let pcm_a = read_wav(&inputs.join("a.wav")).unwrap().samples;
    assert_eq!(ra.samples.len(), 170);
    assert_eq!(ra.samples, pcm_a);
    assert_eq!(rb.samples, b);
}

#[test]
fn enhance_resamples_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let x: Vec<f32> = (0..800).map(|i| (i as f32 * 0.3).sin() * 0.2).collect();
    let wav = dir.path().join("low.wav");
    write_wav(&wav, &AudioFile::new(x, 8000), WavFormat::Float32).unwrap();
    let mut model = Tcrn::<f32>::zeroed(TcrnConfig::default()).unwrap();
    let report = enhance_path(&mut model, &wav, &dir.path().join("out"), "_e").unwrap();
    assert_eq!(report.warnings.len(), 1);
    let out = read_wav(&report.outputs[0]).unwrap();
    assert_eq!(out.sample_rate, 16_000);
    assert!((out.samples.len() as i64 - 1600).abs() <= 1);
}

#[test]
fn evaluation_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = corpus(dir.path());
    let manifest = Manifest::read(&manifest_path).unwrap();

    let oracle = evaluate::<f32>(Enhancer::Oracle, manifest.clone()).unwrap();
    assert_eq!(oracle.rows.len(), 8);
    for r in &oracle.rows {
        assert!((r.enhanced.stoi - 1.0).abs() < 1e-9);
        assert_eq!(r.enhanced.si_snr_db, 100.0);
    }
    // rows are noise conditions: one noise file at two SNRs, plus the mean
    let table = oracle.table_tsv();
    assert_eq!(table.lines().count(), 1 + 2 + 1);
    let groups = oracle.groups();
    assert!(groups[0].snr_db < groups[1].snr_db);
    assert!(groups[0].mixture.si_snr_db < groups[1].mixture.si_snr_db);

    let mut model = Tcrn::<f32>::zeroed(TcrnConfig::default()).unwrap();
    let zero = evaluate(Enhancer::Model(&mut model), manifest.clone()).unwrap();
    for r in &zero.rows {
        assert_eq!(r.mixture, r.enhanced);
    }

    let out = dir.path().join("eval");
    zero.write(&out).unwrap();
    let summary = tcrn::checkpoint::parse_key_values(&fs::read_to_string(out.join("summary.txt")).unwrap()).unwrap();
    assert_eq!(summary["files"], "8");
    assert_eq!(out.join("per_file.tsv").is_file(), true);

    // A missing file is listed and the rest still scored.
    fs::remove_file(dir.path().join("clean").join(format!("{}.wav", manifest.entries[0].clean_id))).unwrap();
    let partial = evaluate::<f32>(Enhancer::Oracle, manifest.clone()).unwrap();
    assert_eq!(partial.missing.len(), 1);
    assert_eq!(partial.rows.len(), 6);

    let empty = Manifest {
        entries: Vec::new(),
        ..manifest
    };
    assert!(evaluate::<f32>(Enhancer::Oracle, empty).is_err());
}
