//! Stimulus waveforms and photometric conversion.
//!
//! Waveforms are rendered on a uniform sample grid. Levels are on-chip
//! illuminance in lux; [`TimeSeries::to_photocurrent`] converts them to the
//! photocurrent the pixel model consumes.

use std::io::Write;

use crate::error::{Error, Result};
use crate::pixel::Polarity;

/// Electron charge in coulombs.
pub const ELECTRON_CHARGE_C: f64 = 1.602_176_634e-19;

/// Photons per second per lumen (scalar lumen to photon-flux conversion).
pub const LUMEN_TO_PHOTON_FLUX: f64 = 1.12e16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Lux,
    Ampere,
}

impl Unit {
    pub fn name(self) -> &'static str {
        match self {
            Unit::Lux => "illuminance (lux)",
            Unit::Ampere => "photocurrent (A)",
        }
    }
}

/// Uniformly sampled, non-negative waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    dt_s: f64,
    t0_s: f64,
    unit: Unit,
    samples: Vec<f64>,
}

impl TimeSeries {
    pub fn new(dt_s: f64, t0_s: f64, unit: Unit, samples: Vec<f64>) -> Result<Self> {
        if !(dt_s > 0.0 && dt_s.is_finite()) {
            return Err(Error::invalid("dt_s", format!("must be > 0, got {dt_s}")));
        }
        if !t0_s.is_finite() {
            return Err(Error::invalid("t0_s", "must be finite"));
        }
        if samples.is_empty() {
            return Err(Error::invalid(
                "samples",
                "series must hold at least one sample",
            ));
        }
        if let Some((i, v)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::invalid(
                format!("samples[{i}]"),
                format!("must be finite and >= 0, got {v}"),
            ));
        }
        Ok(Self {
            dt_s,
            t0_s,
            unit,
            samples,
        })
    }

    pub fn constant(dt_s: f64, n: usize, unit: Unit, value: f64) -> Result<Self> {
        Self::new(dt_s, 0.0, unit, vec![value; n])
    }

    pub fn dt_s(&self) -> f64 {
        self.dt_s
    }

    pub fn t0_s(&self) -> f64 {
        self.t0_s
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Time of sample `index`. Event timestamps use the same expression so
    /// that window membership tests are exact.
    #[inline]
    pub fn time_at(&self, index: usize) -> f64 {
        sample_time(self.t0_s, self.dt_s, index)
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 * self.dt_s
    }

    /// Scale every sample by `k > 0`, keeping the unit.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::invalid("scale", format!("must be > 0, got {k}")));
        }
        Self::new(
            self.dt_s,
            self.t0_s,
            self.unit,
            self.samples.iter().map(|v| v * k).collect(),
        )
    }

    /// Convert an illuminance series to photocurrent.
    pub fn to_photocurrent(&self, photometry: &PhotometryConfig) -> Result<Self> {
        match self.unit {
            Unit::Ampere => Ok(self.clone()),
            Unit::Lux => {
                photometry.validate()?;
                let gain = lux_to_photocurrent(1.0, photometry);
                Ok(Self {
                    unit: Unit::Ampere,
                    samples: self.samples.iter().map(|e| e * gain).collect(),
                    ..*self
                })
            }
        }
    }

    /// Two-column CSV: `t_s,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t_s,value")?;
        for (i, v) in self.samples.iter().enumerate() {
            writeln!(out, "{},{}", self.time_at(i), v)?;
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sample_time(t0_s: f64, dt_s: f64, index: usize) -> f64 {
    t0_s + index as f64 * dt_s
}

/// Half-open response window `[start_s, end_s)` for one stimulus trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialWindow {
    pub start_s: f64,
    pub end_s: f64,
}

impl TrialWindow {
    #[inline]
    pub fn contains(&self, t_s: f64) -> bool {
        t_s >= self.start_s && t_s < self.end_s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SquareWaveSpec {
    pub baseline_lux: f64,
    /// Peak level is `baseline * (1 + c)`.
    pub linear_contrast: f64,
    pub frequency_hz: f64,
    /// Fraction of each period spent at the high level.
    pub duty: f64,
    pub duration_s: f64,
    /// Linear rise/fall time; zero gives instantaneous edges.
    pub ramp_s: f64,
}

impl Default for SquareWaveSpec {
    fn default() -> Self {
        Self {
            baseline_lux: 100.0,
            linear_contrast: 0.0,
            frequency_hz: 5.0,
            duty: 0.5,
            duration_s: 20.2,
            ramp_s: 0.0,
        }
    }
}

impl SquareWaveSpec {
    pub fn validate(&self) -> Result<()> {
        positive("square_wave.baseline_lux", self.baseline_lux)?;
        non_negative("square_wave.linear_contrast", self.linear_contrast)?;
        positive("square_wave.frequency_hz", self.frequency_hz)?;
        if !(self.duty > 0.0 && self.duty < 1.0) {
            return Err(Error::invalid(
                "square_wave.duty",
                format!("must lie in (0, 1), got {}", self.duty),
            ));
        }
        non_negative("square_wave.ramp_s", self.ramp_s)?;
        if !(self.duration_s >= 1.0 / self.frequency_hz) {
            return Err(Error::invalid(
                "square_wave.duration_s",
                format!(
                    "must cover at least one period ({} s), got {}",
                    1.0 / self.frequency_hz,
                    self.duration_s
                ),
            ));
        }
        Ok(())
    }

    fn layout(&self, dt_s: f64) -> Result<SquareLayout> {
        self.validate()?;
        positive("dt_s", dt_s)?;
        let period = 1.0 / self.frequency_hz;
        if dt_s >= 0.5 * period {
            return Err(Error::invalid(
                "dt_s",
                format!(
                    "{dt_s} s cannot represent a half-period of {} s",
                    0.5 * period
                ),
            ));
        }
        let low = (period * (1.0 - self.duty) / dt_s).round() as usize;
        let high = (period * self.duty / dt_s).round() as usize;
        if low == 0 || high == 0 {
            return Err(Error::invalid(
                "square_wave.duty",
                "duty cycle leaves a level shorter than one sample",
            ));
        }
        Ok(SquareLayout {
            low,
            high,
            n: (self.duration_s / dt_s).round() as usize,
        })
    }
}

struct SquareLayout {
    low: usize,
    high: usize,
    n: usize,
}

/// Render a square wave. It starts at baseline; the first rising edge falls
/// after one low phase, at `period * (1 - duty)`.
pub fn make_square_wave(spec: &SquareWaveSpec, dt_s: f64) -> Result<TimeSeries> {
    let layout = spec.layout(dt_s)?;
    let hi = spec.baseline_lux * (1.0 + spec.linear_contrast);
    let mut segments = Vec::new();
    let mut remaining = layout.n;
    while remaining > 0 {
        for (len, level) in [(layout.low, spec.baseline_lux), (layout.high, hi)] {
            let take = len.min(remaining);
            if take > 0 {
                segments.push((take, level));
                remaining -= take;
            }
        }
    }
    let ramp = ramp_samples(spec.ramp_s, dt_s);
    TimeSeries::new(
        dt_s,
        0.0,
        Unit::Lux,
        render(&segments, spec.baseline_lux, ramp),
    )
}

/// Trial windows for a square wave: rising edge to next falling edge for ON,
/// falling edge to next rising edge for OFF. Only windows that end inside the
/// waveform are returned.
pub fn square_wave_windows(
    spec: &SquareWaveSpec,
    dt_s: f64,
    polarity: Polarity,
) -> Result<Vec<TrialWindow>> {
    let SquareLayout { low, high, n } = spec.layout(dt_s)?;
    let period = low + high;
    let (first, len) = match polarity {
        Polarity::On => (low, high),
        Polarity::Off => (period, low),
    };
    let mut windows = Vec::new();
    let mut start = first;
    while start + len <= n {
        windows.push(TrialWindow {
            start_s: sample_time(0.0, dt_s, start),
            end_s: sample_time(0.0, dt_s, start + len),
        });
        start += period;
    }
    Ok(windows)
}

/// Reset-pulse / test-pulse train.
///
/// Each repetition is `[reset, gap, test, gap]`, preceded by one baseline
/// lead-in. For ON testing the reset pulse dips to `baseline / (1 + r)` and the
/// test pulse rises to `baseline * (1 + c)`; OFF testing mirrors this in log
/// space (reset rises, test dips).
#[derive(Debug, Clone, PartialEq)]
pub struct RpTpSpec {
    pub baseline_lux: f64,
    pub reset_linear_contrast: f64,
    pub reset_duration_s: f64,
    pub test_duration_s: f64,
    pub gap_duration_s: f64,
    pub lead_in_s: f64,
    pub test_linear_contrast: f64,
    pub polarity_under_test: Polarity,
    pub n_pulses: usize,
    pub ramp_s: f64,
}

impl Default for RpTpSpec {
    fn default() -> Self {
        Self {
            baseline_lux: 100.0,
            reset_linear_contrast: 0.5,
            reset_duration_s: 0.400,
            test_duration_s: 0.200,
            gap_duration_s: 0.200,
            lead_in_s: 0.200,
            test_linear_contrast: 0.0,
            polarity_under_test: Polarity::On,
            n_pulses: 100,
            ramp_s: 0.0,
        }
    }
}

impl RpTpSpec {
    pub fn validate(&self) -> Result<()> {
        positive("rptp.baseline_lux", self.baseline_lux)?;
        non_negative("rptp.reset_linear_contrast", self.reset_linear_contrast)?;
        non_negative("rptp.test_linear_contrast", self.test_linear_contrast)?;
        positive("rptp.reset_duration_s", self.reset_duration_s)?;
        positive("rptp.test_duration_s", self.test_duration_s)?;
        positive("rptp.gap_duration_s", self.gap_duration_s)?;
        non_negative("rptp.lead_in_s", self.lead_in_s)?;
        non_negative("rptp.ramp_s", self.ramp_s)?;
        if self.n_pulses == 0 {
            return Err(Error::invalid("rptp.n_pulses", "must be >= 1"));
        }
        Ok(())
    }

    /// Duration of one reset/gap/test/gap repetition.
    pub fn cycle_s(&self) -> f64 {
        self.reset_duration_s + self.test_duration_s + 2.0 * self.gap_duration_s
    }
}

pub fn make_rptp_train(
    spec: &RpTpSpec,
    dt_s: f64,
    window_s: f64,
) -> Result<(TimeSeries, Vec<TrialWindow>)> {
    spec.validate()?;
    positive("dt_s", dt_s)?;
    positive("window_s", window_s)?;
    let samples = |d: f64, field: &str| -> Result<usize> {
        let n = (d / dt_s).round() as usize;
        if n == 0 {
            Err(Error::invalid(
                field,
                format!("{d} s is shorter than one sample"),
            ))
        } else {
            Ok(n)
        }
    };
    let lead = (spec.lead_in_s / dt_s).round() as usize;
    let reset = samples(spec.reset_duration_s, "rptp.reset_duration_s")?;
    let gap = samples(spec.gap_duration_s, "rptp.gap_duration_s")?;
    let test = samples(spec.test_duration_s, "rptp.test_duration_s")?;
    let window = samples(window_s, "window_s")?;
    if window > test + gap {
        return Err(Error::invalid(
            "window_s",
            format!(
                "{window_s} s window would run into the next reset pulse (test + gap = {} s)",
                spec.test_duration_s + spec.gap_duration_s
            ),
        ));
    }

    let base = spec.baseline_lux;
    let reset_ratio = 1.0 + spec.reset_linear_contrast;
    let test_ratio = 1.0 + spec.test_linear_contrast;
    let (reset_level, test_level) = match spec.polarity_under_test {
        Polarity::On => (base / reset_ratio, base * test_ratio),
        Polarity::Off => (base * reset_ratio, base / test_ratio),
    };

    let mut segments = Vec::with_capacity(1 + 4 * spec.n_pulses);
    let mut windows = Vec::with_capacity(spec.n_pulses);
    if lead > 0 {
        segments.push((lead, base));
    }
    let mut cursor = lead;
    for _ in 0..spec.n_pulses {
        segments.push((reset, reset_level));
        segments.push((gap, base));
        let lead_edge = cursor + reset + gap;
        windows.push(TrialWindow {
            start_s: sample_time(0.0, dt_s, lead_edge),
            end_s: sample_time(0.0, dt_s, lead_edge + window),
        });
        segments.push((test, test_level));
        segments.push((gap, base));
        cursor = lead_edge + test + gap;
    }
    let ramp = ramp_samples(spec.ramp_s, dt_s);
    let series = TimeSeries::new(dt_s, 0.0, Unit::Lux, render(&segments, base, ramp))?;
    Ok((series, windows))
}

fn ramp_samples(ramp_s: f64, dt_s: f64) -> usize {
    (ramp_s / dt_s).round() as usize
}

/// Expand `(n_samples, level)` segments into samples, optionally ramping
/// linearly into each new level over `ramp` samples.
fn render(segments: &[(usize, f64)], initial: f64, ramp: usize) -> Vec<f64> {
    let total = segments.iter().map(|(n, _)| n).sum();
    let mut out = Vec::with_capacity(total);
    let mut prev = initial;
    for &(n, level) in segments {
        let ramp_n = if level != prev { ramp.min(n) } else { 0 };
        for j in 0..ramp_n {
            let frac = (j + 1) as f64 / ramp_n as f64;
            out.push(prev + (level - prev) * frac);
        }
        out.extend(std::iter::repeat_n(level, n - ramp_n));
        prev = level;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometryConfig {
    /// Average spectral quantum efficiency in (0, 1].
    pub eta: f64,
    pub pixel_pitch_m: f64,
}

impl Default for PhotometryConfig {
    fn default() -> Self {
        Self {
            eta: 0.9,
            pixel_pitch_m: 4.86e-6,
        }
    }
}

impl PhotometryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::invalid(
                "photometry.eta",
                format!("must lie in (0, 1], got {}", self.eta),
            ));
        }
        positive("photometry.pixel_pitch_m", self.pixel_pitch_m)
    }
}

/// Photocurrent (A) produced by on-chip illuminance `lux` on one pixel.
pub fn lux_to_photocurrent(lux: f64, photometry: &PhotometryConfig) -> f64 {
    LUMEN_TO_PHOTON_FLUX
        * lux
        * photometry.eta
        * ELECTRON_CHARGE_C
        * photometry.pixel_pitch_m
        * photometry.pixel_pitch_m
}

/// Natural-log contrast between two illuminance levels.
pub fn log_contrast(e_max: f64, e_min: f64) -> Result<f64> {
    if !(e_min > 0.0) {
        return Err(Error::invalid("e_min", format!("must be > 0, got {e_min}")));
    }
    if !(e_max >= e_min) {
        return Err(Error::invalid(
            "e_max",
            format!("must be >= e_min ({e_min}), got {e_max}"),
        ));
    }
    Ok((e_max / e_min).ln())
}

/// Ordered set of linear contrasts at which an S-curve is sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastSweep {
    linear_contrasts: Vec<f64>,
}

impl Default for ContrastSweep {
    /// Thirty contrasts spaced linearly over 0.01..=0.7.
    fn default() -> Self {
        Self::linear(0.01, 0.7, 30).expect("default sweep is valid")
    }
}

impl ContrastSweep {
    pub fn new(linear_contrasts: Vec<f64>) -> Result<Self> {
        if linear_contrasts.is_empty() {
            return Err(Error::invalid(
                "sweep",
                "must contain at least one contrast",
            ));
        }
        for (i, c) in linear_contrasts.iter().enumerate() {
            if !(c.is_finite() && *c >= 0.0) {
                return Err(Error::invalid(
                    format!("sweep[{i}]"),
                    format!("must be finite and >= 0, got {c}"),
                ));
            }
        }
        if let Some(i) = linear_contrasts.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                format!("sweep[{}]", i + 1),
                "contrasts must be strictly increasing",
            ));
        }
        Ok(Self { linear_contrasts })
    }

    /// `n` linear contrasts evenly spaced from `lo` to `hi` inclusive.
    pub fn linear(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(linspace(lo, hi, n)?)
    }

    /// `n` contrasts evenly spaced in log contrast from `lo` to `hi`.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        Self::new(linspace(lo, hi, n)?.into_iter().map(f64::exp_m1).collect())
    }

    pub fn linear_contrasts(&self) -> &[f64] {
        &self.linear_contrasts
    }

    pub fn len(&self) -> usize {
        self.linear_contrasts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.linear_contrasts.is_empty()
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    match n {
        0 => Err(Error::invalid("sweep.n", "must be >= 1")),
        1 => Ok(vec![lo]),
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            Ok((0..n).map(|i| lo + step * i as f64).collect())
        }
    }
}

pub(crate) fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be > 0, got {v}")))
    }
}

pub(crate) fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(field, format!("must be >= 0, got {v}")))
    }
}
