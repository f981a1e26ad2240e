//! Central-difference verification of analytic gradients.

mod suite;

pub use suite::{check_layer, random_tensor, run_suite, SuiteReport, SuiteRow, TARGETS};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default step for central differences in f64.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on the relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Floor on the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;
/// A central difference cannot resolve derivatives much below
/// `eps * |f| / h`; the denominator is also floored at this multiple of that
/// resolution so exact-zero gradients are not failed on roundoff alone.
pub const ROUNDOFF_MARGIN: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    /// Combine two reports, keeping the worst coordinate.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let checked = self.checked + other.checked;
        let mut worst = if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        };
        worst.checked = checked;
        worst
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, REL_ERROR_FLOOR)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for one central difference with step `h`.
pub fn roundoff_floor(plus: f64, minus: f64, h: f64) -> f64 {
    let resolution = f64::EPSILON * plus.abs().max(minus.abs()) / h;
    REL_ERROR_FLOOR.max(ROUNDOFF_MARGIN * resolution)
}

/// Compare `analytic_grad` against `(f(x + h e_i) - f(x - h e_i)) / 2h` on
/// `n_coords` coordinates drawn without replacement (all of them when
/// `n_coords >= params.len()`).
pub fn finite_diff_check<F>(
    mut f: F,
    params: &Tensor<f64>,
    analytic_grad: &Tensor<f64>,
    h: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::invalid(format!("finite-difference step {h} must be > 0")));
    }
    if params.shape() != analytic_grad.shape() {
        return Err(Error::shape(format!(
            "params {:?} vs gradient {:?}",
            params.shape(),
            analytic_grad.shape()
        )));
    }
    let len = params.len();
    let coords: Vec<usize> = if n_coords >= len {
        (0..len).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = sample(&mut rng, len, n_coords).into_vec();
        picked.sort_unstable();
        picked
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    let mut probe = params.clone();
    let mut first = true;
    for &i in &coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective is non-finite at coordinate {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = analytic_grad.data()[i];
        let err = relative_error_floored(analytic, numeric, roundoff_floor(plus, minus, h));
        if err > report.max_rel_error || first {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic;
            report.numeric = numeric;
            first = false;
        }
    }
    Ok(report)
}
