//! The built-in gradient verification table: every layer, a block, a whole
//! network under the combined loss, and each loss on its own.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::dsp::{ConvGeometry, Stft, StftSpec, WindowKind, WindowSpec};
use crate::error::Result;
use crate::layers::{
    BatchNormLayer, ConvLayer, DeconvLayer, Layer, LstmLayer, Mode, PReluLayer, Parameterized,
};
use crate::loss::{waveform_loss_grad, CombinedLoss, LossConfig, MagnitudeLoss};
use crate::model::{Tcrb, TcrbConfig, Tcrn, TcrnConfig};
use crate::tensor::Tensor;

/// Coordinates sampled per checked array.
const COORDS: usize = 40;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape product matches")
}

/// Check the input gradient and every parameter gradient of
/// `<probe, layer(x)>` for a fixed random probe. Analytic gradients are
/// multiplied by `distort` (1.0 for an honest check).
pub fn check_layer<L: Layer<f64> + ?Sized>(
    layer: &mut L,
    x: &Tensor<f64>,
    seed: u64,
    distort: f64,
) -> Result<Vec<(String, GradCheckReport)>> {
    layer.reset_state();
    let y = layer.forward(x, Mode::Train)?;
    let probe = random_tensor(y.shape(), seed);
    layer.zero_grads();
    let dx = layer.backward(&probe)?.scale(distort);

    let objective = |layer: &mut L, x: &Tensor<f64>| -> Result<f64> {
        layer.reset_state();
        layer.forward(x, Mode::Train)?.dot(&probe)
    };
    let mut out = vec![(
        "input".to_string(),
        finite_diff_check(|xx| objective(layer, xx), x, &dx, DEFAULT_STEP, COORDS, seed)?,
    )];

    let mut params = Vec::new();
    layer.visit_params("", &mut |n, p| params.push((n.to_string(), p.value.clone(), p.grad.scale(distort))));
    for (name, value, grad) in params {
        let set = |layer: &mut L, v: &Tensor<f64>| {
            layer.visit_params("", &mut |n, p| {
                if n == name {
                    p.value = v.clone();
                }
            })
        };
        let r = finite_diff_check(
            |v| {
                set(layer, v);
                objective(layer, x)
            },
            &value,
            &grad,
            DEFAULT_STEP,
            COORDS,
            seed,
        );
        set(layer, &value);
        out.push((name, r?));
    }
    Ok(out)
}

fn merge(reports: &[(String, GradCheckReport)]) -> (GradCheckReport, String) {
    let mut worst = reports[0].clone();
    let mut total = reports[0].1;
    for (name, r) in &reports[1..] {
        total = total.merge(*r);
        if r.max_rel_error > worst.1.max_rel_error {
            worst = (name.clone(), *r);
        }
    }
    (total, worst.0)
}

/// One row of the gradient table.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub target: String,
    pub report: GradCheckReport,
    /// Array holding the worst coordinate.
    pub worst_array: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&SuiteRow> {
        self.rows.iter().filter(|r| !r.passed).collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>14} {:>8}  {:<6} worst array", "target", "max_rel_error", "coords", "result")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<24} {:>14.3e} {:>8}  {:<6} {}",
                r.target,
                r.report.max_rel_error,
                r.report.checked,
                if r.passed { "pass" } else { "FAIL" },
                r.worst_array
            )?;
        }
        Ok(())
    }
}

/// Names of the suite targets, in run order.
pub const TARGETS: [&str; 12] = [
    "conv_windowed",
    "batchnorm_train",
    "prelu",
    "lstm",
    "deconv_envelope",
    "tcrb",
    "tcrn_l_comb",
    "stft_magnitude",
    "loss_waveform",
    "loss_stft_mag_short",
    "loss_stft_mag_long",
    "loss_combined",
];

fn tiny_block() -> TcrbConfig {
    TcrbConfig {
        channels: 4,
        kernel_size: 8,
        stride: 4,
        lstm_hidden: 4,
        window: WindowKind::HannPeriodic,
    }
}

fn speechy(n: usize, seed: u64) -> Vec<f64> {
    let noise = random_tensor(&[n], seed);
    (0..n)
        .map(|t| (t as f64 * 0.05).sin() + 0.4 * (t as f64 * 0.23).cos() + 0.2 * noise.data()[t])
        .collect()
}

/// Run every target. `corrupt` names a target whose analytic gradient is
/// deliberately scaled by 1.5 before comparison (used to prove the table
/// catches a broken backward pass).
pub fn run_suite(corrupt: Option<&str>, seed: u64) -> Result<SuiteReport> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &target in TARGETS.iter() {
        let distort = if corrupt == Some(target) { 1.5 } else { 1.0 };
        let s = rng.gen::<u64>();
        let reports = run_target(target, distort, s)?;
        let (report, worst_array) = merge(&reports);
        rows.push(SuiteRow {
            target: target.to_string(),
            passed: report.passed(DEFAULT_TOLERANCE),
            report,
            worst_array,
        });
    }
    Ok(SuiteReport {
        rows,
        tolerance: DEFAULT_TOLERANCE,
    })
}

fn run_target(target: &str, distort: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hann = WindowSpec::hann(8);
    match target {
        "conv_windowed" => {
            let geom = ConvGeometry::new(8, 4, 2, 3).with_left_pad(4);
            let mut l = ConvLayer::<f64>::new(geom, hann, &mut rng)?;
            l.bias.value = random_tensor(&[3], seed ^ 1);
            check_layer(&mut l, &random_tensor(&[2, 2, 24], seed ^ 2), seed, distort)
        }
        "batchnorm_train" => {
            let mut l = BatchNormLayer::<f64>::new(3);
            l.gamma.value = random_tensor(&[3], seed ^ 1);
            l.beta.value = random_tensor(&[3], seed ^ 2);
            check_layer(&mut l, &random_tensor(&[3, 3, 5], seed ^ 3), seed, distort)
        }
        "prelu" => {
            let mut l = PReluLayer::<f64>::new(3);
            l.alpha.value = random_tensor(&[3], seed ^ 1);
            check_layer(&mut l, &random_tensor(&[2, 3, 7], seed ^ 2), seed, distort)
        }
        "lstm" => {
            let mut l = LstmLayer::<f64>::new(3, 4, &mut rng);
            check_layer(&mut l, &random_tensor(&[2, 3, 6], seed ^ 1), seed, distort)
        }
        "deconv_envelope" => {
            let mut l = DeconvLayer::<f64>::new(ConvGeometry::new(8, 4, 3, 1), hann, true, &mut rng)?;
            l.bias.value = random_tensor(&[1], seed ^ 1);
            check_layer(&mut l, &random_tensor(&[2, 3, 5], seed ^ 2), seed, distort)
        }
        "tcrb" => {
            let mut block = Tcrb::<f64>::new(tiny_block(), &mut rng)?;
            randomize_affine(&mut block, seed);
            check_layer(&mut block, &random_tensor(&[2, 32], seed ^ 1), seed, distort)
        }
        "tcrn_l_comb" => check_tcrn(distort, seed),
        "stft_magnitude" => {
            let stft = Stft::<f64>::new(StftSpec::hann(16))?;
            let x = Tensor::vector(&speechy(56, seed));
            let cache = stft.forward(x.data())?;
            let probe = random_tensor(&[cache.magnitude.len()], seed ^ 1);
            let grad = Tensor::vector(&stft.backward(&cache, probe.data())).scale(distort);
            let r = finite_diff_check(
                |v| Ok(stft.forward(v.data())?.magnitude.iter().zip(probe.data()).map(|(a, b)| a * b).sum()),
                &x,
                &grad,
                DEFAULT_STEP,
                COORDS,
                seed,
            )?;
            Ok(vec![("signal".into(), r)])
        }
        "loss_waveform" => {
            let s = speechy(400, seed);
            let e = Tensor::vector(&speechy(400, seed ^ 1));
            let (_, g) = waveform_loss_grad(&s, e.data())?;
            let r = finite_diff_check(
                |v| Ok(waveform_loss_grad(&s, v.data())?.0),
                &e,
                &Tensor::vector(&g).scale(distort),
                DEFAULT_STEP,
                COORDS,
                seed,
            )?;
            Ok(vec![("estimate".into(), r)])
        }
        "loss_stft_mag_short" | "loss_stft_mag_long" => {
            let cfg = LossConfig::default();
            let spec = if target.ends_with("short") { cfg.short_spec() } else { cfg.long_spec() };
            let loss = MagnitudeLoss::<f64>::new(spec)?;
            let s = speechy(3000, seed);
            let e = Tensor::vector(&speechy(3000, seed ^ 1));
            let (_, g) = loss.value_grad(&s, e.data())?;
            let r = finite_diff_check(
                |v| loss.value(&s, v.data()),
                &e,
                &Tensor::vector(&g).scale(distort),
                DEFAULT_STEP,
                COORDS,
                seed,
            )?;
            Ok(vec![("estimate".into(), r)])
        }
        "loss_combined" => {
            let loss = CombinedLoss::<f64>::new(LossConfig::default())?;
            let s = speechy(3000, seed);
            let e = Tensor::vector(&speechy(3000, seed ^ 1));
            let (_, g) = loss.report_grad(&s, e.data())?;
            let r = finite_diff_check(
                |v| Ok(loss.report(&s, v.data())?.l_comb),
                &e,
                &Tensor::vector(&g).scale(distort),
                DEFAULT_STEP,
                COORDS,
                seed,
            )?;
            Ok(vec![("estimate".into(), r)])
        }
        other => Err(crate::Error::invalid(format!("unknown gradcheck target `{other}`"))),
    }
}

/// Give BN and PReLU non-default values so their gradients are exercised.
fn randomize_affine(model: &mut dyn Parameterized<f64>, seed: u64) {
    let mut k = 0u64;
    model.visit_params("", &mut |name, p| {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("alpha") || name.ends_with("bias") {
            k += 1;
            let r = random_tensor(p.value.shape(), seed ^ (100 + k));
            p.value = if name.ends_with("gamma") { r.map(|v| 1.0 + 0.5 * v) } else { r.scale(0.3) };
        }
    });
}

/// `L_comb` of a one-block tiny network w.r.t. every parameter array.
fn check_tcrn(distort: f64, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let config = TcrnConfig {
        n_blocks: 1,
        block: tiny_block(),
        sample_rate: 16_000,
    };
    let mut model = Tcrn::<f64>::new(config, seed)?;
    randomize_affine(&mut model, seed);
    let loss = CombinedLoss::<f64>::new(LossConfig {
        alpha: 0.5,
        short_window: 16,
        long_window: 32,
    })?;
    let noisy = random_tensor(&[2, 32], seed ^ 1);
    let clean = Tensor::from_vec(&[2, 32], speechy(64, seed ^ 2))?;
    let lengths = [32, 28];

    let objective = |model: &mut Tcrn<f64>| -> Result<f64> {
        model.reset_state();
        let y = model.forward(&noisy, Mode::Train)?;
        Ok(loss.batch(&clean, &y, &lengths, false)?.0.l_comb)
    };
    model.reset_state();
    let y = model.forward(&noisy, Mode::Train)?;
    let (_, g) = loss.batch(&clean, &y, &lengths, true)?;
    model.zero_grads();
    model.backward(&g.expect("gradient requested"))?;

    let mut params = Vec::new();
    model.visit_params("", &mut |n, p| params.push((n.to_string(), p.value.clone(), p.grad.scale(distort))));
    let mut out = Vec::new();
    for (name, value, grad) in params {
        let set = |model: &mut Tcrn<f64>, v: &Tensor<f64>| {
            model.visit_params("", &mut |n, p| {
                if n == name {
                    p.value = v.clone();
                }
            })
        };
        let r = finite_diff_check(
            |v| {
                set(&mut model, v);
                objective(&mut model)
            },
            &value,
            &grad,
            DEFAULT_STEP,
            COORDS,
            seed,
        );
        set(&mut model, &value);
        out.push((name, r?));
    }
    Ok(out)
}
