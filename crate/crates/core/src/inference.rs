//! Noise calibration against background-activity targets, and dark-current
//! inversion from families of plateau thresholds.

use std::io::Write;

use rayon::prelude::*;

use crate::array::derive_seed;
use crate::error::{Error, Result};
use crate::pixel::{simulate_log, LogSignal, PixelConfig};
use crate::signal::{lux_to_photocurrent, positive, PhotometryConfig};

const CALIBRATION_STREAM: u64 = 0x0063_616c_6962; // "calib"
const MAX_BRACKET_DOUBLINGS: usize = 16;

/// Inputs of a background-activity calibration. Everything except the
/// noise level is held fixed while sigma is searched.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSetup {
    pub f3db_hz: f64,
    pub target_ba_hz: f64,
    pub n_runs: usize,
    /// Scored length of each run; a warm-up is simulated before it.
    pub run_duration_s: f64,
    /// Relative tolerance on the achieved rate.
    pub tolerance: f64,
    pub theta_on: f64,
    pub theta_off: f64,
    pub refractory_s: f64,
    pub dt_s: f64,
    pub warmup_s: f64,
    pub seed: u64,
    /// Initial sigma bracket in log units; the upper bound doubles until the
    /// target is straddled.
    pub bracket: (f64, f64),
    pub max_iterations: usize,
}

impl CalibrationSetup {
    pub fn new(f3db_hz: f64, target_ba_hz: f64) -> Self {
        let pixel = PixelConfig::default();
        Self {
            f3db_hz,
            target_ba_hz,
            n_runs: 30,
            run_duration_s: 100.0,
            tolerance: 0.1,
            theta_on: pixel.theta_on,
            theta_off: pixel.theta_off,
            refractory_s: pixel.refractory_s,
            dt_s: pixel.dt_s,
            warmup_s: pixel.warmup_s,
            seed: 0,
            bracket: (1e-4, 1.0),
            max_iterations: 60,
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("calibration.target_ba_hz", self.target_ba_hz)?;
        positive("calibration.run_duration_s", self.run_duration_s)?;
        if self.n_runs == 0 {
            return Err(Error::invalid("calibration.n_runs", "must be >= 1"));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::invalid(
                "calibration.tolerance",
                format!("must lie in (0, 1), got {}", self.tolerance),
            ));
        }
        let (lo, hi) = self.bracket;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::invalid(
                "calibration.bracket",
                format!("need 0 < lo < hi, got [{lo}, {hi}]"),
            ));
        }
        self.pixel(0.0, 0).validate()
    }

    fn pixel(&self, sigma: f64, seed: u64) -> PixelConfig {
        PixelConfig {
            theta_on: self.theta_on,
            theta_off: self.theta_off,
            f3db_hz: self.f3db_hz,
            noise_sigma: sigma,
            refractory_s: self.refractory_s,
            dark_current_a: 0.0,
            dt_s: self.dt_s,
            warmup_s: self.warmup_s,
            seed,
        }
    }
}

/// Mean background activity over a set of DC runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaMeasurement {
    pub sigma: f64,
    pub mean_hz: f64,
    /// Standard error of the mean over runs.
    pub std_err_hz: f64,
}

/// Simulate `setup.n_runs` DC runs at `sigma` and average their background
/// activity (both polarities, warm-up excluded). Run `r` draws its noise
/// from a seed derived from `(seed, r)`, so repeated calls at different
/// sigmas reuse the same random numbers.
pub fn measure_background_activity(
    setup: &CalibrationSetup,
    sigma: f64,
    seed: u64,
) -> Result<BaMeasurement> {
    setup.validate()?;
    let warmup_len = (setup.warmup_s / setup.dt_s).round() as usize;
    let len = warmup_len + (setup.run_duration_s / setup.dt_s).round() as usize;
    let log = LogSignal::constant(0.0, len, setup.dt_s)?;
    let scored_s = (len - warmup_len) as f64 * setup.dt_s;
    let warmup_s = warmup_len as f64 * setup.dt_s;
    let rates = (0..setup.n_runs)
        .into_par_iter()
        .map(|r| {
            let cfg = setup.pixel(sigma, derive_seed(seed, r, CALIBRATION_STREAM));
            let stream = simulate_log(&log, &cfg, 0)?;
            Ok(stream.since(warmup_s).len() as f64 / scored_s)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let std_err = if rates.len() > 1 {
        let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        f64::NAN
    };
    Ok(BaMeasurement {
        sigma,
        mean_hz: mean,
        std_err_hz: std_err,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCalibration {
    pub f3db_hz: f64,
    pub target_ba_hz: f64,
    pub calibrated_sigma: f64,
    pub achieved_ba_hz: f64,
    pub achieved_std_err_hz: f64,
    pub n_runs: usize,
    pub run_duration_s: f64,
    /// Every `(sigma, rate)` evaluated, in order.
    pub trace: Vec<BaMeasurement>,
}

/// Bisection on `ln sigma` until the mean background activity lies within
/// the relative tolerance of the target.
pub fn calibrate_noise(setup: &CalibrationSetup) -> Result<NoiseCalibration> {
    setup.validate()?;
    let target = setup.target_ba_hz;
    let mut trace = Vec::new();
    let eval = |sigma: f64, trace: &mut Vec<BaMeasurement>| -> Result<BaMeasurement> {
        let m = measure_background_activity(setup, sigma, setup.seed)?;
        trace.push(m);
        Ok(m)
    };
    let done = |m: &BaMeasurement| (m.mean_hz - target).abs() <= setup.tolerance * target;
    let finish = |m: BaMeasurement, trace: Vec<BaMeasurement>| NoiseCalibration {
        f3db_hz: setup.f3db_hz,
        target_ba_hz: target,
        calibrated_sigma: m.sigma,
        achieved_ba_hz: m.mean_hz,
        achieved_std_err_hz: m.std_err_hz,
        n_runs: setup.n_runs,
        run_duration_s: setup.run_duration_s,
        trace,
    };

    let (mut lo, mut hi) = setup.bracket;
    let ba_lo = eval(lo, &mut trace)?;
    if done(&ba_lo) {
        return Ok(finish(ba_lo, trace));
    }
    let mut ba_hi = eval(hi, &mut trace)?;
    let mut doublings = 0;
    while ba_hi.mean_hz < target && !done(&ba_hi) && doublings < MAX_BRACKET_DOUBLINGS {
        lo = hi;
        hi *= 2.0;
        ba_hi = eval(hi, &mut trace)?;
        doublings += 1;
    }
    if done(&ba_hi) {
        return Ok(finish(ba_hi, trace));
    }
    if ba_lo.mean_hz > target || ba_hi.mean_hz < target {
        return Err(Error::BracketFailure {
            lo: setup.bracket.0,
            hi,
            ba_lo: ba_lo.mean_hz,
            ba_hi: ba_hi.mean_hz,
            target_hz: target,
        });
    }

    let mut best = ba_hi;
    for _ in 0..setup.max_iterations {
        let mid = (lo * hi).sqrt();
        let m = eval(mid, &mut trace)?;
        if (m.mean_hz - target).abs() < (best.mean_hz - target).abs() {
            best = m;
        }
        if done(&m) {
            return Ok(finish(m, trace));
        }
        if m.mean_hz < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::CalibrationDidNotConverge {
        iterations: setup.max_iterations,
        tolerance: setup.tolerance,
        best_sigma: best.sigma,
        best_ba_hz: best.mean_hz,
    })
}

/// `f3db_hz,target_ba_hz,sigma,achieved_ba_hz` rows.
pub fn write_calibration_csv<W: Write>(
    rows: &[NoiseCalibration],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "f3db_hz,target_ba_hz,sigma,achieved_ba_hz")?;
    for c in rows {
        writeln!(
            out,
            "{},{},{},{}",
            c.f3db_hz, c.target_ba_hz, c.calibrated_sigma, c.achieved_ba_hz
        )?;
    }
    Ok(())
}

/// Dark current that makes a log contrast `contrast` look like `theta`:
/// solves `ln((I1 e^C + Id) / (I1 + Id)) = theta` for `Id`.
pub fn dark_current_multiplier(contrast: f64, theta: f64) -> f64 {
    (contrast.exp() - theta.exp()) / theta.exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarkCurrentPoint {
    pub baseline_lux: f64,
    /// Plateau threshold measured at this baseline, log units.
    pub theta_100_c: f64,
    pub i_pho1_a: f64,
    pub i_dark_a: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DarkCurrentEstimate {
    pub per_curve: Vec<DarkCurrentPoint>,
    pub mean_a: f64,
    /// Sample standard deviation over curves.
    pub std_a: f64,
    pub theta_ref: f64,
}

impl DarkCurrentEstimate {
    pub fn relative_spread(&self) -> f64 {
        self.std_a / self.mean_a
    }

    /// Mean dark current if every measured contrast had reached only
    /// `attenuation` of its settled value. Curves whose attenuated contrast
    /// no longer exceeds the reference contribute zero.
    pub fn attenuation_corrected_mean(&self, attenuation: f64) -> f64 {
        let sum: f64 = self
            .per_curve
            .iter()
            .map(|p| {
                let c = attenuation * p.theta_100_c;
                if c > self.theta_ref {
                    p.i_pho1_a * dark_current_multiplier(c, self.theta_ref)
                } else {
                    0.0
                }
            })
            .sum();
        sum / self.per_curve.len() as f64
    }

    /// `baseline_lux,C,i_pho1_fA,i_dark_fA` rows followed by `mean` and `std`
    /// summary rows in the `i_dark_fA` column.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        const FA: f64 = 1e15;
        writeln!(out, "baseline_lux,C,i_pho1_fA,i_dark_fA")?;
        for p in &self.per_curve {
            writeln!(
                out,
                "{},{},{},{}",
                p.baseline_lux,
                p.theta_100_c,
                p.i_pho1_a * FA,
                p.i_dark_a * FA
            )?;
        }
        writeln!(out, "mean,,,{}", self.mean_a * FA)?;
        writeln!(out, "std,,,{}", self.std_a * FA)
    }
}

/// Reference threshold of a family: the plateau threshold of the brightest
/// curve, where dark current is negligible.
pub fn reference_threshold(family: &[(f64, f64)]) -> Result<f64> {
    family
        .iter()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|&(_, theta)| theta)
        .ok_or_else(|| Error::invalid("family", "needs at least one curve"))
}

/// Invert the dark-current threshold condition per curve.
///
/// `family` holds `(baseline_lux, theta_100_C)` pairs; curves at
/// intermediate illuminations with excess noise should be removed by the
/// caller beforehand.
pub fn infer_dark_current(
    family: &[(f64, f64)],
    theta_ref: f64,
    photometry: &PhotometryConfig,
) -> Result<DarkCurrentEstimate> {
    photometry.validate()?;
    positive("theta_ref", theta_ref)?;
    if family.len() < 2 {
        return Err(Error::invalid(
            "family",
            format!("need >= 2 curves for a spread, got {}", family.len()),
        ));
    }
    let per_curve = family
        .iter()
        .map(|&(baseline_lux, contrast)| {
            positive("family.baseline_lux", baseline_lux)?;
            if !(contrast > theta_ref) {
                return Err(Error::NoDarkCurrentSignal {
                    baseline_lux,
                    contrast,
                    theta_ref,
                });
            }
            let i_pho1_a = lux_to_photocurrent(baseline_lux, photometry);
            Ok(DarkCurrentPoint {
                baseline_lux,
                theta_100_c: contrast,
                i_pho1_a,
                i_dark_a: i_pho1_a * dark_current_multiplier(contrast, theta_ref),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_curve.len() as f64;
    let mean_a = per_curve.iter().map(|p| p.i_dark_a).sum::<f64>() / n;
    let std_a = (per_curve
        .iter()
        .map(|p| (p.i_dark_a - mean_a).powi(2))
        .sum::<f64>()
        / (n - 1.0))
        .sqrt();
    Ok(DarkCurrentEstimate {
        per_curve,
        mean_a,
        std_a,
        theta_ref,
    })
}

/// Dark current implied by a low-light cutoff: the illuminance at which a
/// doubling of light just reaches `theta_on`.
pub fn llco_dark_current(
    llco_lux: f64,
    theta_on: f64,
    photometry: &PhotometryConfig,
) -> Result<f64> {
    positive("llco_lux", llco_lux)?;
    positive("theta_on", theta_on)?;
    photometry.validate()?;
    if theta_on >= std::f64::consts::LN_2 {
        return Err(Error::invalid(
            "theta_on",
            format!("{theta_on} >= ln 2: a doubling of light can never reach threshold"),
        ));
    }
    Ok(lux_to_photocurrent(llco_lux, photometry)
        * dark_current_multiplier(std::f64::consts::LN_2, theta_on))
}

/// Fraction of a step that a first-order stage with corner `f3db_hz`
/// reaches within `window_s`.
pub fn bandwidth_attenuation(f3db_hz: f64, window_s: f64) -> Result<f64> {
    positive("f3db_hz", f3db_hz)?;
    positive("window_s", window_s)?;
    Ok(-(-2.0 * std::f64::consts::PI * f3db_hz * window_s).exp_m1())
}
