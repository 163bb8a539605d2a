//! Config-driven experiments.
//!
//! An [`ExperimentConfig`] names a preset (`kind`) and optionally overrides any
//! of its settings. [`run_experiment`] resolves the preset, calibrates noise if
//! a background-activity target is given, measures every requested curve and
//! returns all artifacts in memory; [`Artifacts::write_to`] writes them in one
//! pass, so a failed run leaves no partial output.
//!
//! Preset defaults (all overridable):
//!
//! | kind         | f3dB    | refractory | theta on/off | noise      | stimuli  | pixels | epsilon |
//! |--------------|---------|------------|--------------|------------|----------|--------|---------|
//! | ideal        | 2 kHz   | 10 ms      | 0.30 / 0.30  | none       | SW, RPTP | 1      | auto    |
//! | noise        | 2 kHz   | 100 us     | 0.30 / 0.30  | BA 0.5 Hz  | SW       | 10     | auto    |
//! | mismatch     | 50 Hz   | 100 us     | 0.33 / 0.30  | BA 0.02 Hz | SW       | 10     | auto    |
//! | refractory   | 50 Hz   | 10 ms      | 0.33 / 0.30  | BA 0.02 Hz | SW       | 10     | auto    |
//! | robustness   | 50 Hz   | 10 ms      | 0.33 / 0.30  | BA 0.5 Hz  | SW, RPTP | 30     | 0.01    |
//! | dark-current | 50 Hz   | 10 ms      | 0.35 / 0.30  | BA 0.02 Hz | SW       | 20     | auto    |
//! | custom       | 2 kHz   | 100 us     | 0.30 / 0.30  | none       | SW       | 1      | auto    |
//!
//! Every preset measures ON only except `ideal`, which measures both
//! polarities. Sweeps default to 30 linear contrasts from 0.01 to 0.7; the
//! dark-current preset uses 66 log-spaced contrasts from 0.25 to 0.90 in log
//! units and five baselines from 76 to 304 mlx plus a 300 lx reference, with a
//! planted dark current of 5 fA.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::array::{ArrayConfig, ThresholdMode};
use crate::error::{Error, Result};
use crate::inference::{
    calibrate_noise, infer_dark_current, reference_threshold, write_calibration_csv,
    CalibrationSetup, DarkCurrentEstimate, NoiseCalibration,
};
use crate::pixel::{PixelConfig, Polarity};
use crate::plot::render_svg;
use crate::recorded::{export_runs, write_recorded_events_csv, write_schedule_csv};
use crate::scurve::{
    estimate, score_runs, simulate_sweep, write_estimates_csv, ContrastRun, CountingRule,
    CurveMeta, Epsilon, Measurement, SCurve, Stimulus, ThresholdEstimate, DEFAULT_WINDOW_S,
};
use crate::signal::{ContrastSweep, PhotometryConfig, RpTpSpec, SquareWaveSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Ideal,
    Noise,
    Mismatch,
    Refractory,
    Robustness,
    DarkCurrent,
    Custom,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Ideal => "ideal",
            ExperimentKind::Noise => "noise",
            ExperimentKind::Mismatch => "mismatch",
            ExperimentKind::Refractory => "refractory",
            ExperimentKind::Robustness => "robustness",
            ExperimentKind::DarkCurrent => "dark-current",
            ExperimentKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StimulusChoice {
    SquareWave,
    Rptp,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolarityChoice {
    On,
    Off,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// Evenly spaced linear contrasts from `lo` to `hi`.
    Linear,
    /// Evenly spaced log contrasts from `lo` to `hi` (log units).
    Log,
    /// The linear contrasts in `values`.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum EpsilonSetting {
    Value(f64),
    Named(String),
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelSection {
    pub theta_on: Option<f64>,
    pub theta_off: Option<f64>,
    pub f3db_hz: Option<f64>,
    /// Explicit per-sample noise; excludes `noise.target_ba_hz`.
    pub noise_sigma: Option<f64>,
    pub refractory_s: Option<f64>,
    pub dark_current_a: Option<f64>,
    pub dt_s: Option<f64>,
    pub warmup_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    /// Calibrate sigma to this background activity (events/pixel/s).
    pub target_ba_hz: Option<f64>,
    pub n_runs: Option<usize>,
    pub run_duration_s: Option<f64>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySection {
    pub n_pixels: Option<usize>,
    pub sigma_mismatch_on: Option<f64>,
    pub sigma_mismatch_off: Option<f64>,
    /// Pin every pixel to `base + offset` instead of sampling.
    pub fixed_on_offset: Option<f64>,
    pub fixed_off_offset: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusSection {
    pub kind: Option<StimulusChoice>,
    pub baseline_lux: Option<f64>,
    pub ramp_s: Option<f64>,
    pub frequency_hz: Option<f64>,
    pub duty: Option<f64>,
    pub duration_s: Option<f64>,
    pub reset_linear_contrast: Option<f64>,
    pub reset_duration_s: Option<f64>,
    pub test_duration_s: Option<f64>,
    pub gap_duration_s: Option<f64>,
    pub lead_in_s: Option<f64>,
    pub n_pulses: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub kind: Option<SweepKind>,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub n: Option<usize>,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountingSection {
    pub window_s: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    /// `"auto"` or a probability margin.
    pub epsilon: Option<EpsilonSetting>,
    pub polarity: Option<PolarityChoice>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotometrySection {
    pub eta: Option<f64>,
    pub pixel_pitch_m: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarkCurrentSection {
    pub baselines_lux: Option<Vec<f64>>,
    /// Bright baseline whose plateau threshold serves as the reference.
    pub reference_lux: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Write the SVG plot (default true).
    pub plot: Option<bool>,
    /// Also write the first curve's raw events and schedule in the
    /// recorded-dataset format.
    pub export_events: Option<bool>,
}

/// Top-level experiment file. Only `kind` is required.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: Option<u64>,
    #[serde(default)]
    pub pixel: PixelSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub array: ArraySection,
    #[serde(default)]
    pub stimulus: StimulusSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub counting: CountingSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub photometry: PhotometrySection,
    #[serde(default)]
    pub dark_current: DarkCurrentSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// A config with only `kind` set.
    pub fn preset(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seed: None,
            pixel: Default::default(),
            noise: Default::default(),
            array: Default::default(),
            stimulus: Default::default(),
            sweep: Default::default(),
            counting: Default::default(),
            estimator: Default::default(),
            photometry: Default::default(),
            dark_current: Default::default(),
            output: Default::default(),
        }
    }

    /// Parse TOML text. Errors name the offending field path.
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::ConfigParse {
            path: source.to_string(),
            message: e.to_string(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().trim().to_string();
            Error::ConfigParse {
                path: source.to_string(),
                message: if path == "." {
                    message
                } else {
                    format!("at `{path}`: {message}")
                },
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }
}

/// How the noise level is obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum NoisePlan {
    Sigma(f64),
    Calibrate(CalibrationSetup),
}

/// What a finished curve is checked against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Expectation {
    /// nct_50 and theta_100 within one grid step of the threshold.
    WithinGridStep,
    /// nct_50 below the threshold by at least two fit standard errors.
    ShiftedLeft,
    /// theta_100 strictly above the threshold.
    Above,
    /// |theta_100 - threshold| <= tolerance.
    Within(f64),
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub pixel: PixelConfig,
    pub noise: NoisePlan,
    pub n_pixels: usize,
    pub sigma_mismatch: (f64, f64),
    pub fixed_offsets: Option<(f64, f64)>,
    pub stimuli: Vec<Stimulus>,
    pub polarities: Vec<Polarity>,
    pub sweep: ContrastSweep,
    pub window_s: f64,
    pub epsilon: Epsilon,
    pub photometry: PhotometryConfig,
    /// Baselines for the dark-current family, plus the reference baseline.
    pub dark_family: Option<(Vec<f64>, f64)>,
    pub expectation: Option<Expectation>,
    pub plot: bool,
    pub export_events: bool,
    pub output_dir: Option<PathBuf>,
}

struct Preset {
    f3db_hz: f64,
    refractory_s: f64,
    theta: (f64, f64),
    target_ba_hz: Option<f64>,
    stimulus: StimulusChoice,
    polarity: PolarityChoice,
    n_pixels: usize,
    epsilon: Epsilon,
    expectation: Option<Expectation>,
}

fn preset(kind: ExperimentKind) -> Preset {
    use ExperimentKind::*;
    let base = Preset {
        f3db_hz: 2000.0,
        refractory_s: 100e-6,
        theta: (0.3, 0.3),
        target_ba_hz: None,
        stimulus: StimulusChoice::SquareWave,
        polarity: PolarityChoice::On,
        n_pixels: 1,
        epsilon: Epsilon::Auto,
        expectation: None,
    };
    match kind {
        Ideal => Preset {
            refractory_s: 10e-3,
            stimulus: StimulusChoice::Both,
            polarity: PolarityChoice::Both,
            expectation: Some(Expectation::WithinGridStep),
            ..base
        },
        Noise => Preset {
            target_ba_hz: Some(0.5),
            n_pixels: 10,
            expectation: Some(Expectation::ShiftedLeft),
            ..base
        },
        Mismatch => Preset {
            f3db_hz: 50.0,
            theta: (0.33, 0.3),
            target_ba_hz: Some(0.02),
            n_pixels: 10,
            expectation: Some(Expectation::Above),
            ..base
        },
        Refractory => Preset {
            f3db_hz: 50.0,
            refractory_s: 10e-3,
            theta: (0.33, 0.3),
            target_ba_hz: Some(0.02),
            n_pixels: 10,
            expectation: Some(Expectation::Within(0.03)),
            ..base
        },
        Robustness => Preset {
            f3db_hz: 50.0,
            refractory_s: 10e-3,
            theta: (0.33, 0.3),
            target_ba_hz: Some(0.5),
            stimulus: StimulusChoice::Both,
            n_pixels: 30,
            epsilon: Epsilon::Fixed(0.01),
            expectation: Some(Expectation::Within(0.05)),
            ..base
        },
        DarkCurrent => Preset {
            f3db_hz: 50.0,
            refractory_s: 10e-3,
            theta: (0.35, 0.3),
            target_ba_hz: Some(0.02),
            n_pixels: 20,
            ..base
        },
        Custom => base,
    }
}

pub const DARK_BASELINES_LUX: [f64; 5] = [0.076, 0.1075, 0.152, 0.215, 0.304];
pub const DARK_REFERENCE_LUX: f64 = 300.0;
pub const DARK_PLANTED_A: f64 = 5e-15;

impl ExperimentConfig {
    /// Apply preset defaults and validate every section.
    pub fn resolve(&self) -> Result<Plan> {
        let p = preset(self.kind);
        let px = &self.pixel;
        let defaults = PixelConfig::default();
        let dark_default = if self.kind == ExperimentKind::DarkCurrent {
            DARK_PLANTED_A
        } else {
            0.0
        };
        let seed = self.seed.unwrap_or(0);
        let pixel = PixelConfig {
            theta_on: px.theta_on.unwrap_or(p.theta.0),
            theta_off: px.theta_off.unwrap_or(p.theta.1),
            f3db_hz: px.f3db_hz.unwrap_or(p.f3db_hz),
            noise_sigma: 0.0,
            refractory_s: px.refractory_s.unwrap_or(p.refractory_s),
            dark_current_a: px.dark_current_a.unwrap_or(dark_default),
            dt_s: px.dt_s.unwrap_or(defaults.dt_s),
            warmup_s: px.warmup_s.unwrap_or(defaults.warmup_s),
            seed: 0,
        };
        pixel.validate()?;

        let noise = match (px.noise_sigma, self.noise.target_ba_hz) {
            (Some(_), Some(_)) => {
                return Err(Error::invalid(
                    "noise.target_ba_hz",
                    "give either pixel.noise_sigma or noise.target_ba_hz, not both",
                ))
            }
            (Some(sigma), None) => NoisePlan::Sigma(sigma),
            (None, target) => match target.or(p.target_ba_hz) {
                None => NoisePlan::Sigma(0.0),
                Some(target) => {
                    let d = CalibrationSetup::new(pixel.f3db_hz, target);
                    let setup = CalibrationSetup {
                        n_runs: self.noise.n_runs.unwrap_or(d.n_runs),
                        run_duration_s: self.noise.run_duration_s.unwrap_or(d.run_duration_s),
                        tolerance: self.noise.tolerance.unwrap_or(d.tolerance),
                        dt_s: pixel.dt_s,
                        warmup_s: pixel.warmup_s,
                        seed,
                        ..d
                    };
                    setup.validate()?;
                    NoisePlan::Calibrate(setup)
                }
            },
        };
        if let NoisePlan::Sigma(s) = noise {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::invalid(
                    "pixel.noise_sigma",
                    "must be finite and >= 0",
                ));
            }
        }

        let a = &self.array;
        let n_pixels = a.n_pixels.unwrap_or(p.n_pixels);
        let sigma_mismatch = (
            a.sigma_mismatch_on.unwrap_or(0.0),
            a.sigma_mismatch_off.unwrap_or(0.0),
        );
        let fixed_offsets = match (a.fixed_on_offset, a.fixed_off_offset) {
            (None, None) => None,
            (on, off) => Some((on.unwrap_or(0.0), off.unwrap_or(0.0))),
        };

        let s = &self.stimulus;
        let baseline_lux = s.baseline_lux.unwrap_or(100.0);
        let ramp_s = s.ramp_s.unwrap_or(0.0);
        let sw_default = SquareWaveSpec::default();
        let square = SquareWaveSpec {
            baseline_lux,
            linear_contrast: 0.0,
            frequency_hz: s.frequency_hz.unwrap_or(sw_default.frequency_hz),
            duty: s.duty.unwrap_or(sw_default.duty),
            duration_s: s.duration_s.unwrap_or(sw_default.duration_s),
            ramp_s,
        };
        let rp_default = RpTpSpec::default();
        let rptp = RpTpSpec {
            baseline_lux,
            reset_linear_contrast: s
                .reset_linear_contrast
                .unwrap_or(rp_default.reset_linear_contrast),
            reset_duration_s: s.reset_duration_s.unwrap_or(rp_default.reset_duration_s),
            test_duration_s: s.test_duration_s.unwrap_or(rp_default.test_duration_s),
            gap_duration_s: s.gap_duration_s.unwrap_or(rp_default.gap_duration_s),
            lead_in_s: s.lead_in_s.unwrap_or(rp_default.lead_in_s),
            n_pulses: s.n_pulses.unwrap_or(rp_default.n_pulses),
            ramp_s,
            ..rp_default
        };
        let stimuli = match s.kind.unwrap_or(p.stimulus) {
            StimulusChoice::SquareWave => vec![Stimulus::SquareWave(square)],
            StimulusChoice::Rptp => vec![Stimulus::RpTp(rptp)],
            StimulusChoice::Both => vec![Stimulus::SquareWave(square), Stimulus::RpTp(rptp)],
        };
        for stim in &stimuli {
            match stim {
                Stimulus::SquareWave(sw) => sw.validate()?,
                Stimulus::RpTp(rp) => rp.validate()?,
            }
        }
        let polarities = match self.estimator.polarity.unwrap_or(p.polarity) {
            PolarityChoice::On => vec![Polarity::On],
            PolarityChoice::Off => vec![Polarity::Off],
            PolarityChoice::Both => vec![Polarity::On, Polarity::Off],
        };

        let sweep = self.resolve_sweep()?;
        let window_s = self.counting.window_s.unwrap_or(DEFAULT_WINDOW_S);
        CountingRule::rptp(window_s).validate()?;
        let epsilon = match &self.estimator.epsilon {
            None => p.epsilon,
            Some(EpsilonSetting::Named(s)) if s == "auto" => Epsilon::Auto,
            Some(EpsilonSetting::Named(s)) => {
                return Err(Error::invalid(
                    "estimator.epsilon",
                    format!("expected \"auto\" or a number, got \"{s}\""),
                ))
            }
            Some(EpsilonSetting::Value(v)) => {
                if !(*v > 0.0 && *v < 0.5) {
                    return Err(Error::invalid(
                        "estimator.epsilon",
                        format!("must lie in (0, 0.5), got {v}"),
                    ));
                }
                Epsilon::Fixed(*v)
            }
        };
        let ph = PhotometryConfig::default();
        let photometry = PhotometryConfig {
            eta: self.photometry.eta.unwrap_or(ph.eta),
            pixel_pitch_m: self.photometry.pixel_pitch_m.unwrap_or(ph.pixel_pitch_m),
        };
        photometry.validate()?;

        let dark_family = if self.kind == ExperimentKind::DarkCurrent {
            let baselines = self
                .dark_current
                .baselines_lux
                .clone()
                .unwrap_or_else(|| DARK_BASELINES_LUX.to_vec());
            let reference = self
                .dark_current
                .reference_lux
                .unwrap_or(DARK_REFERENCE_LUX);
            if baselines.len() < 2 {
                return Err(Error::invalid(
                    "dark_current.baselines_lux",
                    "need at least two baselines",
                ));
            }
            for &b in baselines.iter().chain(std::iter::once(&reference)) {
                if !(b.is_finite() && b > 0.0) {
                    return Err(Error::invalid(
                        "dark_current.baselines_lux",
                        format!("baselines must be finite and > 0, got {b}"),
                    ));
                }
            }
            if baselines.iter().any(|&b| b >= reference) {
                return Err(Error::invalid(
                    "dark_current.reference_lux",
                    "reference baseline must be brighter than every family baseline",
                ));
            }
            Some((baselines, reference))
        } else {
            None
        };

        let plan = Plan {
            kind: self.kind,
            seed,
            pixel,
            noise,
            n_pixels,
            sigma_mismatch,
            fixed_offsets,
            stimuli,
            polarities,
            sweep,
            window_s,
            epsilon,
            photometry,
            dark_family,
            expectation: p.expectation,
            plot: self.output.plot.unwrap_or(true),
            export_events: self.output.export_events.unwrap_or(false),
            output_dir: self.output.dir.clone(),
        };
        plan.array(0.0, 0).validate()?;
        Ok(plan)
    }

    fn resolve_sweep(&self) -> Result<ContrastSweep> {
        let s = &self.sweep;
        let dark = self.kind == ExperimentKind::DarkCurrent;
        let kind = s.kind.unwrap_or(if s.values.is_some() {
            SweepKind::Explicit
        } else if dark {
            SweepKind::Log
        } else {
            SweepKind::Linear
        });
        match kind {
            SweepKind::Explicit => {
                let values = s.values.clone().ok_or_else(|| {
                    Error::invalid("sweep.values", "required for an explicit sweep")
                })?;
                ContrastSweep::new(values)
            }
            SweepKind::Linear => {
                ContrastSweep::linear(s.lo.unwrap_or(0.01), s.hi.unwrap_or(0.7), s.n.unwrap_or(30))
            }
            SweepKind::Log => {
                let (lo, hi, n) = if dark {
                    (0.25, 0.90, 66)
                } else {
                    (0.01, 0.531, 30)
                };
                ContrastSweep::log_spaced(s.lo.unwrap_or(lo), s.hi.unwrap_or(hi), s.n.unwrap_or(n))
            }
        }
    }
}

impl Plan {
    /// Array configuration for a given noise level and baseline dark current.
    pub fn array(&self, sigma: f64, seed_offset: u64) -> ArrayConfig {
        ArrayConfig {
            n_pixels: self.n_pixels,
            base: PixelConfig {
                noise_sigma: sigma,
                ..self.pixel.clone()
            },
            sigma_mismatch_on: self.sigma_mismatch.0,
            sigma_mismatch_off: self.sigma_mismatch.1,
            base_seed: self.seed.wrapping_add(seed_offset),
            mode: match self.fixed_offsets {
                Some((on_offset, off_offset)) => ThresholdMode::Fixed {
                    on_offset,
                    off_offset,
                },
                None => ThresholdMode::Random,
            },
            run: 0,
        }
    }

    pub fn threshold(&self, polarity: Polarity) -> f64 {
        let (on, off) = self.fixed_offsets.unwrap_or((0.0, 0.0));
        match polarity {
            Polarity::On => self.pixel.theta_on + on,
            Polarity::Off => self.pixel.theta_off + off,
        }
    }

    /// Largest log-contrast spacing of the sweep.
    pub fn grid_step(&self) -> f64 {
        self.sweep
            .linear_contrasts()
            .windows(2)
            .map(|w| w[1].ln_1p() - w[0].ln_1p())
            .fold(0.0, f64::max)
    }
}

/// One measured curve with its estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveResult {
    pub label: String,
    pub curve: SCurve,
    pub estimate: ThresholdEstimate,
    /// Threshold the pixel was configured with for this polarity.
    pub true_threshold: f64,
    /// nct_50 lies below the configured threshold by at least two fit
    /// standard errors.
    pub shifted_left: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: String,
    pub expected: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub plan: Plan,
    pub calibration: Option<NoiseCalibration>,
    pub sigma: f64,
    pub curves: Vec<CurveResult>,
    pub dark_current: Option<DarkCurrentEstimate>,
    pub checks: Vec<Check>,
    /// Raw runs of the first curve when `output.export_events` is set.
    pub exported_runs: Option<Vec<ContrastRun>>,
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn curve(&self, label: &str) -> Option<&CurveResult> {
        self.curves.iter().find(|c| c.label == label)
    }
}

/// Named output files, written together by [`Artifacts::write_to`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Artifacts {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Artifacts {
    pub fn insert(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(name.into(), bytes);
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn stimulus_label(stim: &Stimulus) -> &'static str {
    match stim {
        Stimulus::SquareWave(_) => "square-wave",
        Stimulus::RpTp(_) => "rptp",
    }
}

fn with_baseline(stim: &Stimulus, lux: f64) -> Stimulus {
    match stim {
        Stimulus::SquareWave(s) => Stimulus::SquareWave(SquareWaveSpec {
            baseline_lux: lux,
            ..s.clone()
        }),
        Stimulus::RpTp(s) => Stimulus::RpTp(RpTpSpec {
            baseline_lux: lux,
            ..s.clone()
        }),
    }
}

/// Run a resolved plan. Noise calibration, when requested, happens first.
pub fn run_plan(plan: &Plan) -> Result<ExperimentOutcome> {
    let (sigma, calibration) = match &plan.noise {
        NoisePlan::Sigma(s) => (*s, None),
        NoisePlan::Calibrate(setup) => {
            let c = calibrate_noise(setup)?;
            (c.calibrated_sigma, Some(c))
        }
    };
    run_plan_with_sigma(plan, sigma, calibration)
}

/// Run a resolved plan at a known noise level.
pub fn run_plan_with_sigma(
    plan: &Plan,
    sigma: f64,
    calibration: Option<NoiseCalibration>,
) -> Result<ExperimentOutcome> {
    let mut jobs: Vec<(String, Stimulus, Polarity)> = Vec::new();
    match &plan.dark_family {
        None => {
            for stim in &plan.stimuli {
                for &pol in &plan.polarities {
                    jobs.push((format!("{}-{pol}", stimulus_label(stim)), stim.clone(), pol));
                }
            }
        }
        Some((baselines, reference)) => {
            let stim = &plan.stimuli[0];
            for &pol in &plan.polarities {
                for &lux in baselines.iter().chain(std::iter::once(reference)) {
                    jobs.push((format!("{lux}lx-{pol}"), with_baseline(stim, lux), pol));
                }
            }
        }
    }

    let mut curves = Vec::with_capacity(jobs.len());
    let mut first_runs = None;
    for (i, (label, stimulus, polarity)) in jobs.into_iter().enumerate() {
        let rule = match stimulus {
            Stimulus::SquareWave(_) => CountingRule::square_wave(),
            Stimulus::RpTp(_) => CountingRule::rptp(plan.window_s),
        };
        let m = Measurement {
            stimulus,
            sweep: plan.sweep.clone(),
            array: plan.array(sigma, i as u64),
            photometry: plan.photometry,
            rule,
            polarity,
        };
        let runs = simulate_sweep(&m)?;
        let meta = CurveMeta {
            stimulus: m.stimulus.kind().to_string(),
            baseline_lux: m.stimulus.baseline_lux(),
            digest: m.digest(),
            refractory_overlaps: Vec::new(),
        };
        let curve = score_runs(&runs, polarity, meta)?;
        if plan.export_events && first_runs.is_none() {
            first_runs = Some(runs);
        }
        let estimate = estimate(&curve, plan.epsilon)?;
        let true_threshold = plan.threshold(polarity);
        let shifted_left = match (estimate.nct_50, estimate.gauss_mu_se) {
            (Some(n), Some(se)) if se.is_finite() => n + 2.0 * se < true_threshold,
            _ => false,
        };
        curves.push(CurveResult {
            label,
            curve,
            estimate,
            true_threshold,
            shifted_left,
        });
    }

    let dark_current = match &plan.dark_family {
        None => None,
        Some((baselines, reference)) => {
            let pick = |lux: f64| -> Result<f64> {
                let c = curves
                    .iter()
                    .find(|c| {
                        c.curve.meta.baseline_lux == lux && c.curve.polarity == plan.polarities[0]
                    })
                    .ok_or_else(|| Error::invalid("dark_current", "missing family curve"))?;
                c.estimate.theta_100.ok_or(Error::NeverReachesOne {
                    level: 1.0 - c.estimate.epsilon,
                })
            };
            let theta_ref = reference_threshold(&[(*reference, pick(*reference)?)])?;
            let family = baselines
                .iter()
                .map(|&b| Ok((b, pick(b)?)))
                .collect::<Result<Vec<_>>>()?;
            Some(infer_dark_current(&family, theta_ref, &plan.photometry)?)
        }
    };

    let checks = checks(plan, &curves, dark_current.as_ref());
    let outcome = ExperimentOutcome {
        plan: plan.clone(),
        calibration,
        sigma,
        curves,
        dark_current,
        checks,
        exported_runs: first_runs,
    };
    Ok(outcome)
}

fn checks(plan: &Plan, curves: &[CurveResult], dark: Option<&DarkCurrentEstimate>) -> Vec<Check> {
    let mut out = Vec::new();
    let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    if let Some(exp) = plan.expectation {
        for c in curves {
            let t = c.true_threshold;
            let e = &c.estimate;
            let (expected, pass, value) = match exp {
                Expectation::WithinGridStep => {
                    let step = plan.grid_step();
                    let near = |v: Option<f64>| v.is_some_and(|v| (v - t).abs() <= step);
                    (
                        format!("nct_50 and theta_100 within {step:.4} of {t}"),
                        near(e.nct_50) && near(e.theta_100),
                        format!("nct_50={} theta_100={}", fmt(e.nct_50), fmt(e.theta_100)),
                    )
                }
                Expectation::ShiftedLeft => (
                    format!("nct_50 + 2 se < {t}"),
                    c.shifted_left,
                    format!(
                        "nct_50={} se={}",
                        fmt(e.nct_50),
                        e.gauss_mu_se
                            .map_or("undefined".into(), |s| format!("{s:.2e}"))
                    ),
                ),
                Expectation::Above => (
                    format!("theta_100 > {t}"),
                    e.theta_100.is_some_and(|v| v > t),
                    format!("theta_100={}", fmt(e.theta_100)),
                ),
                Expectation::Within(tol) => (
                    format!("theta_100 = {t} +/- {tol}"),
                    e.theta_100.is_some_and(|v| (v - t).abs() <= tol),
                    format!("theta_100={}", fmt(e.theta_100)),
                ),
            };
            out.push(Check {
                name: c.label.clone(),
                value,
                expected,
                pass,
            });
        }
    }
    if plan.kind == ExperimentKind::Robustness {
        let err = |kind: &str| {
            curves
                .iter()
                .find(|c| c.label.starts_with(kind))
                .and_then(|c| c.estimate.theta_100.map(|v| (v - c.true_threshold).abs()))
        };
        if let (Some(sw), Some(rp)) = (err("square-wave"), err("rptp")) {
            out.push(Check {
                name: "square-wave-vs-rptp".into(),
                value: format!("sw_error={sw:.4} rptp_error={rp:.4}"),
                expected: "sw_error <= rptp_error".into(),
                pass: sw <= rp,
            });
        }
    }
    if let Some(d) = dark {
        let planted = plan.pixel.dark_current_a;
        if planted > 0.0 {
            let rel = (d.mean_a - planted).abs() / planted;
            out.push(Check {
                name: "dark-current-mean".into(),
                value: format!("{:.4} fA", d.mean_a * 1e15),
                expected: format!("{:.4} fA +/- 10%", planted * 1e15),
                pass: rel <= 0.10,
            });
        }
    }
    out
}

pub const SUMMARY_HEADER: &str =
    "label,stimulus,polarity,baseline_lux,nct_50,nct_se,theta_100,epsilon,true_threshold,flags";

impl ExperimentOutcome {
    /// Per-curve summary rows. Flags combine the estimator flags with
    /// `shifted-left`.
    pub fn summary_csv(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| {
            v.filter(|v| v.is_finite())
                .map(|v| v.to_string())
                .unwrap_or_default()
        };
        let _ = writeln!(s, "{SUMMARY_HEADER}");
        for c in &self.curves {
            let mut flags = c.estimate.flags.render();
            if c.shifted_left {
                if !flags.is_empty() {
                    flags.push('|');
                }
                flags.push_str("shifted-left");
            }
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                c.label,
                c.curve.meta.stimulus,
                c.curve.polarity,
                c.curve.meta.baseline_lux,
                opt(c.estimate.nct_50),
                opt(c.estimate.gauss_mu_se),
                opt(c.estimate.theta_100),
                c.estimate.epsilon,
                c.true_threshold,
                flags
            );
        }
        s
    }

    pub fn checks_csv(&self) -> String {
        let mut s = String::from("check,value,expected,result\n");
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                c.name,
                c.value,
                c.expected,
                if c.pass { "pass" } else { "fail" }
            );
        }
        s
    }

    /// Every output file of the run.
    pub fn artifacts(&self) -> Result<Artifacts> {
        let mut a = Artifacts::default();
        for c in &self.curves {
            a.insert(
                format!("{}.scurve.csv", c.label),
                c.curve.to_csv_string().into_bytes(),
            );
            let mut buf = Vec::new();
            write_estimates_csv(std::slice::from_ref(&c.estimate), &mut buf)
                .map_err(|e| Error::io("<memory>", e))?;
            a.insert(format!("{}.estimate.csv", c.label), buf);
        }
        a.insert("summary.csv", self.summary_csv().into_bytes());
        if !self.checks.is_empty() {
            a.insert("checks.csv", self.checks_csv().into_bytes());
        }
        if let Some(c) = &self.calibration {
            let mut buf = Vec::new();
            write_calibration_csv(std::slice::from_ref(c), &mut buf)
                .map_err(|e| Error::io("<memory>", e))?;
            a.insert("calibration.csv", buf);
        }
        if let Some(d) = &self.dark_current {
            let mut buf = Vec::new();
            d.write_csv(&mut buf)
                .map_err(|e| Error::io("<memory>", e))?;
            a.insert("dark_current.csv", buf);
        }
        if self.plan.plot {
            let curves: Vec<SCurve> = self.curves.iter().map(|c| c.curve.clone()).collect();
            let estimates: Vec<ThresholdEstimate> =
                self.curves.iter().map(|c| c.estimate.clone()).collect();
            a.insert("scurves.svg", render_svg(&curves, &estimates).into_bytes());
        }
        if let Some(runs) = &self.exported_runs {
            let (events, schedule) = export_runs(runs);
            let mut buf = Vec::new();
            write_recorded_events_csv(&events, &mut buf).map_err(|e| Error::io("<memory>", e))?;
            a.insert("events.csv", buf);
            let mut buf = Vec::new();
            write_schedule_csv(&schedule, &mut buf).map_err(|e| Error::io("<memory>", e))?;
            a.insert("schedule.csv", buf);
        }
        Ok(a)
    }
}

/// Resolve, run and collect artifacts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(ExperimentOutcome, Artifacts)> {
    let plan = config.resolve()?;
    let outcome = run_plan(&plan)?;
    let artifacts = outcome.artifacts()?;
    Ok((outcome, artifacts))
}
