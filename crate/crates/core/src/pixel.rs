//! Behavioral model of a single event-camera pixel.
//!
//! Per sample `n` the pixel computes `v[n] = ln(I[n] + I_dark) + noise[n]`,
//! low-pass filters it with a forward-Euler first-order update, and compares
//! the filtered value with a memorized reference. Crossing `theta_on` above
//! the reference emits an ON event, crossing `theta_off` below emits OFF.
//! After an event the pixel ignores `round(refractory / dt)` samples and then
//! memorizes the filtered value of the next sample as its new reference.
//!
//! The filter starts settled: its state is the noise-free log level of sample 0
//! plus a draw from the stationary distribution of the filtered noise. The
//! initial reference is the filtered value of sample 0. If both thresholds are
//! crossed on one sample ON wins (only reachable with `theta` values that
//! overlap the noise floor pathologically).
//!
//! Noise is `noise_sigma * z` with `z` drawn from a Xoshiro256++ stream seeded
//! by `seed`, using the ziggurat standard-normal sampler from `rand_distr`. One
//! variate is drawn for the initial state and then one per sample, refractory
//! or not, so the noise sequence is aligned to sample indices.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{
    lux_to_photocurrent, non_negative, positive, sample_time, PhotometryConfig, TimeSeries, Unit,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    /// `1` for ON, `0` for OFF, as written in event files.
    pub fn bit(self) -> u8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => 0,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            1 => Some(Polarity::On),
            0 => Some(Polarity::Off),
            _ => None,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Polarity::On => Polarity::Off,
            Polarity::Off => Polarity::On,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::On => "on",
            Polarity::Off => "off",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelConfig {
    /// ON threshold in natural-log contrast units.
    pub theta_on: f64,
    pub theta_off: f64,
    pub f3db_hz: f64,
    /// Per-sample standard deviation of additive noise in log units.
    pub noise_sigma: f64,
    pub refractory_s: f64,
    pub dark_current_a: f64,
    pub dt_s: f64,
    /// Leading interval excluded from every statistic.
    pub warmup_s: f64,
    pub seed: u64,
}

impl Default for PixelConfig {
    fn default() -> Self {
        Self {
            theta_on: 0.3,
            theta_off: 0.3,
            f3db_hz: 2000.0,
            noise_sigma: 0.0,
            refractory_s: 100e-6,
            dark_current_a: 0.0,
            dt_s: 1e-5,
            warmup_s: 0.1,
            seed: 0,
        }
    }
}

impl PixelConfig {
    pub fn validate(&self) -> Result<()> {
        positive("pixel.theta_on", self.theta_on)?;
        positive("pixel.theta_off", self.theta_off)?;
        positive("pixel.f3db_hz", self.f3db_hz)?;
        positive("pixel.dt_s", self.dt_s)?;
        non_negative("pixel.noise_sigma", self.noise_sigma)?;
        non_negative("pixel.refractory_s", self.refractory_s)?;
        non_negative("pixel.dark_current_a", self.dark_current_a)?;
        non_negative("pixel.warmup_s", self.warmup_s)?;
        let ratio = self.dt_s / self.tau_s();
        if ratio >= 1.0 {
            return Err(Error::EulerUnstable {
                dt_s: self.dt_s,
                f3db_hz: self.f3db_hz,
                ratio,
            });
        }
        Ok(())
    }

    /// Filter time constant `1 / (2 pi f3dB)`.
    pub fn tau_s(&self) -> f64 {
        1.0 / (2.0 * std::f64::consts::PI * self.f3db_hz)
    }

    pub fn refractory_samples(&self) -> usize {
        (self.refractory_s / self.dt_s).round() as usize
    }
}

/// One forward-Euler step of a first-order low-pass filter.
#[inline]
pub fn lowpass_step(v_prev: f64, v_in: f64, dt_s: f64, tau_s: f64) -> f64 {
    lowpass_alpha(v_prev, v_in, dt_s / tau_s)
}

#[inline(always)]
fn lowpass_alpha(v_prev: f64, v_in: f64, alpha: f64) -> f64 {
    v_prev + alpha * (v_in - v_prev)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub t_s: f64,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub duration_s: f64,
    pub pixel_id: u32,
}

impl EventStream {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.events
            .iter()
            .filter(|e| e.polarity == polarity)
            .count()
    }

    /// Events at or after `t_s`.
    pub fn since(&self, t_s: f64) -> &[Event] {
        let start = self.events.partition_point(|e| e.t_s < t_s);
        &self.events[start..]
    }
}

/// Event timestamp in integer microseconds.
#[inline]
pub fn to_micros(t_s: f64) -> i64 {
    (t_s * 1e6).round() as i64
}

/// Write events of several pixels as `t_us,pixel_id,polarity`, ordered by
/// time and then pixel id.
pub fn write_events_csv<W: Write>(streams: &[EventStream], mut out: W) -> std::io::Result<()> {
    let mut rows: Vec<(i64, u32, u8)> = streams
        .iter()
        .flat_map(|s| {
            s.events
                .iter()
                .map(move |e| (to_micros(e.t_s), s.pixel_id, e.polarity.bit()))
        })
        .collect();
    rows.sort_unstable();
    writeln!(out, "t_us,pixel_id,polarity")?;
    for (t, id, p) in rows {
        writeln!(out, "{t},{id},{p}")?;
    }
    Ok(())
}

/// Log-compressed pixel input `ln(I + I_dark)`, shareable across pixels.
#[derive(Debug, Clone)]
pub struct LogSignal {
    dt_s: f64,
    t0_s: f64,
    kind: LogKind,
}

#[derive(Debug, Clone)]
enum LogKind {
    Samples(Vec<f64>),
    Constant { value: f64, len: usize },
}

impl LogSignal {
    pub fn from_photocurrent(input: &TimeSeries, dark_current_a: f64) -> Result<Self> {
        if input.unit() != Unit::Ampere {
            return Err(Error::UnitMismatch {
                expected: Unit::Ampere.name(),
                found: input.unit().name(),
            });
        }
        Self::from_series(input, &PhotometryConfig::default(), dark_current_a)
    }

    /// Log signal of an illuminance or photocurrent series, converting lux
    /// through `photometry` without an intermediate photocurrent buffer.
    pub fn from_series(
        input: &TimeSeries,
        photometry: &PhotometryConfig,
        dark_current_a: f64,
    ) -> Result<Self> {
        let gain = match input.unit() {
            Unit::Ampere => 1.0,
            Unit::Lux => {
                photometry.validate()?;
                lux_to_photocurrent(1.0, photometry)
            }
        };
        let mut logs = Vec::with_capacity(input.len());
        for (index, &v) in input.samples().iter().enumerate() {
            let arg = v * gain + dark_current_a;
            if !(arg > 0.0) {
                return Err(Error::NonPositiveLogArgument { index, value: arg });
            }
            logs.push(arg.ln());
        }
        Ok(Self {
            dt_s: input.dt_s(),
            t0_s: input.t0_s(),
            kind: LogKind::Samples(logs),
        })
    }

    /// DC input of `len` samples at log level `value`, without materializing it.
    pub fn constant(value: f64, len: usize, dt_s: f64) -> Result<Self> {
        positive("dt_s", dt_s)?;
        if len == 0 || !value.is_finite() {
            return Err(Error::invalid(
                "log_signal",
                "need >= 1 sample of a finite level",
            ));
        }
        Ok(Self {
            dt_s,
            t0_s: 0.0,
            kind: LogKind::Constant { value, len },
        })
    }

    pub fn len(&self) -> usize {
        match &self.kind {
            LogKind::Samples(v) => v.len(),
            LogKind::Constant { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dt_s(&self) -> f64 {
        self.dt_s
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 * self.dt_s
    }
}

/// Simulate one pixel on a photocurrent waveform.
pub fn simulate_pixel(input: &TimeSeries, cfg: &PixelConfig) -> Result<EventStream> {
    cfg.validate()?;
    let log = LogSignal::from_photocurrent(input, cfg.dark_current_a)?;
    simulate_log(&log, cfg, 0)
}

/// Simulate one pixel on a precomputed log signal. `cfg.dark_current_a` is
/// assumed to be folded into `log` already.
pub fn simulate_log(log: &LogSignal, cfg: &PixelConfig, pixel_id: u32) -> Result<EventStream> {
    cfg.validate()?;
    let rel = (log.dt_s - cfg.dt_s).abs() / cfg.dt_s;
    if rel > 1e-9 {
        return Err(Error::invalid(
            "pixel.dt_s",
            format!(
                "input sampled at {} s but pixel steps {} s",
                log.dt_s, cfg.dt_s
            ),
        ));
    }
    let events = match &log.kind {
        LogKind::Samples(v) => run(v.as_slice(), log.t0_s, cfg),
        LogKind::Constant { value, len } => run(&Constant(*value, *len), log.t0_s, cfg),
    };
    Ok(EventStream {
        events,
        duration_s: log.duration_s(),
        pixel_id,
    })
}

trait Source {
    fn len(&self) -> usize;
    fn at(&self, n: usize) -> f64;
}

impl Source for [f64] {
    #[inline(always)]
    fn len(&self) -> usize {
        <[f64]>::len(self)
    }
    #[inline(always)]
    fn at(&self, n: usize) -> f64 {
        self[n]
    }
}

struct Constant(f64, usize);

impl Source for Constant {
    #[inline(always)]
    fn len(&self) -> usize {
        self.1
    }
    #[inline(always)]
    fn at(&self, _: usize) -> f64 {
        self.0
    }
}

trait Noise {
    fn draw(&mut self) -> f64;

    /// A draw from the stationary output distribution of the filter driven
    /// by this noise: variance `sigma^2 * alpha / (2 - alpha)`.
    fn settled(&mut self, alpha: f64) -> f64 {
        self.draw() * (alpha / (2.0 - alpha)).sqrt()
    }
}

struct Silent;

impl Noise for Silent {
    #[inline(always)]
    fn draw(&mut self) -> f64 {
        0.0
    }
}

struct Gaussian {
    sigma: f64,
    rng: Xoshiro256PlusPlus,
}

impl Noise for Gaussian {
    #[inline(always)]
    fn draw(&mut self) -> f64 {
        self.sigma * self.rng.sample::<f64, _>(StandardNormal)
    }
}

fn run<S: Source + ?Sized>(src: &S, t0_s: f64, cfg: &PixelConfig) -> Vec<Event> {
    if cfg.noise_sigma > 0.0 {
        let noise = Gaussian {
            sigma: cfg.noise_sigma,
            rng: Xoshiro256PlusPlus::seed_from_u64(cfg.seed),
        };
        run_with(src, t0_s, cfg, noise)
    } else {
        run_with(src, t0_s, cfg, Silent)
    }
}

fn run_with<S: Source + ?Sized, N: Noise>(
    src: &S,
    t0_s: f64,
    cfg: &PixelConfig,
    mut noise: N,
) -> Vec<Event> {
    let n = src.len();
    let alpha = cfg.dt_s / cfg.tau_s();
    let (theta_on, theta_off) = (cfg.theta_on, cfg.theta_off);
    let refractory = cfg.refractory_samples();

    let mut events = Vec::new();
    // start from the stationary state so the first reference is a typical
    // noisy sample rather than the clean level
    let first = src.at(0);
    let mut y = first + noise.settled(alpha);
    y = lowpass_alpha(y, first + noise.draw(), alpha);
    let mut reference = y;
    let mut i = 1;
    while i < n {
        y = lowpass_alpha(y, src.at(i) + noise.draw(), alpha);
        let diff = y - reference;
        let polarity = if diff > theta_on {
            Polarity::On
        } else if -diff > theta_off {
            Polarity::Off
        } else {
            i += 1;
            continue;
        };
        events.push(Event {
            t_s: sample_time(t0_s, cfg.dt_s, i),
            polarity,
        });
        // refractory: keep filtering, then memorize the next sample
        let rearm = (i + refractory + 1).min(n);
        for j in i + 1..rearm {
            y = lowpass_alpha(y, src.at(j) + noise.draw(), alpha);
        }
        if rearm < n {
            y = lowpass_alpha(y, src.at(rearm) + noise.draw(), alpha);
            reference = y;
        }
        i = rearm + 1;
    }
    events
}

/// Events per pixel per second, both polarities counted.
pub fn background_activity_rate(
    streams: &[EventStream],
    duration_s: f64,
    n_pixels: usize,
) -> Result<f64> {
    positive("duration_s", duration_s)?;
    if n_pixels == 0 {
        return Err(Error::invalid("n_pixels", "must be >= 1"));
    }
    let total: usize = streams.iter().map(EventStream::len).sum();
    Ok(total as f64 / (duration_s * n_pixels as f64))
}
