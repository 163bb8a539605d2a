//! Pixel arrays with per-pixel threshold mismatch.
//!
//! Pixels are independent: pixel `i` runs [`simulate_log`] with its own
//! thresholds and noise seed. Seeds come from [`pixel_seed`], a splitmix64 mix
//! of `(base_seed, i)`, so growing the array never reshuffles the noise of
//! existing pixels and results do not depend on scheduling.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pixel::{simulate_log, EventStream, LogSignal, PixelConfig};
use crate::signal::{non_negative, TimeSeries};

/// Lowest threshold a sampled pixel may keep.
pub const THRESHOLD_FLOOR: f64 = 0.01;

const THRESHOLD_STREAM: u64 = 0x7468_7265_7368; // "thresh"

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Thresholds drawn from `N(base, sigma^2)` per pixel and polarity,
    /// ON and OFF independently.
    Random,
    /// Every pixel gets `base + offset`, e.g. exactly one sigma above.
    Fixed { on_offset: f64, off_offset: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayConfig {
    pub n_pixels: usize,
    /// Template for every pixel; its `seed` is replaced per pixel.
    pub base: PixelConfig,
    pub sigma_mismatch_on: f64,
    pub sigma_mismatch_off: f64,
    pub base_seed: u64,
    pub mode: ThresholdMode,
    /// Noise realization index. Thresholds depend only on `base_seed`, so
    /// repeated runs of one array share its mismatch but not its noise.
    pub run: u64,
}

impl ArrayConfig {
    pub fn single(base: PixelConfig, base_seed: u64) -> Self {
        Self {
            n_pixels: 1,
            base,
            sigma_mismatch_on: 0.0,
            sigma_mismatch_off: 0.0,
            base_seed,
            mode: ThresholdMode::Random,
            run: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pixels == 0 {
            return Err(Error::invalid("array.n_pixels", "must be >= 1"));
        }
        u32::try_from(self.n_pixels)
            .map_err(|_| Error::invalid("array.n_pixels", "must fit in a u32 pixel id"))?;
        self.base.validate()?;
        non_negative("array.sigma_mismatch_on", self.sigma_mismatch_on)?;
        non_negative("array.sigma_mismatch_off", self.sigma_mismatch_off)?;
        if let ThresholdMode::Fixed {
            on_offset,
            off_offset,
        } = self.mode
        {
            for (field, theta) in [
                ("array.on_offset", self.base.theta_on + on_offset),
                ("array.off_offset", self.base.theta_off + off_offset),
            ] {
                if !(theta >= THRESHOLD_FLOOR) {
                    return Err(Error::invalid(
                        field,
                        format!("offset threshold {theta} is below the {THRESHOLD_FLOOR} floor"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Full configuration of pixel `index`, given its sampled thresholds.
    pub fn pixel_config(&self, index: usize, thetas: (f64, f64)) -> PixelConfig {
        PixelConfig {
            theta_on: thetas.0,
            theta_off: thetas.1,
            seed: pixel_run_seed(self.base_seed, self.run, index),
            ..self.base.clone()
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream_seed(base_seed: u64, index: u64, stream: u64) -> u64 {
    splitmix64(base_seed ^ splitmix64(index.wrapping_add(splitmix64(stream))))
}

/// Noise seed of pixel `index` in run 0.
pub fn pixel_seed(base_seed: u64, index: usize) -> u64 {
    pixel_run_seed(base_seed, 0, index)
}

/// Noise seed of pixel `index` in noise realization `run`:
/// `splitmix64(base ^ splitmix64(index + splitmix64(run)))`.
pub fn pixel_run_seed(base_seed: u64, run: u64, index: usize) -> u64 {
    stream_seed(base_seed, index as u64, run)
}

/// Derive an independent seed for a numbered sub-task (contrast point,
/// calibration run, ...).
pub fn derive_seed(base_seed: u64, index: usize, stream: u64) -> u64 {
    stream_seed(base_seed, index as u64, stream)
}

/// Per-pixel `(theta_on, theta_off)`.
///
/// Draws below [`THRESHOLD_FLOOR`] are clamped to it; if more than 0.1% of
/// pixels would need clamping the configuration is rejected.
pub fn sample_thresholds(cfg: &ArrayConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let base = (cfg.base.theta_on, cfg.base.theta_off);
    let thetas: Vec<(f64, f64)> = match cfg.mode {
        ThresholdMode::Fixed {
            on_offset,
            off_offset,
        } => vec![(base.0 + on_offset, base.1 + off_offset); cfg.n_pixels],
        ThresholdMode::Random => {
            if cfg.sigma_mismatch_on == 0.0 && cfg.sigma_mismatch_off == 0.0 {
                vec![base; cfg.n_pixels]
            } else {
                let on = Normal::new(base.0, cfg.sigma_mismatch_on)
                    .map_err(|e| Error::invalid("array.sigma_mismatch_on", e.to_string()))?;
                let off = Normal::new(base.1, cfg.sigma_mismatch_off)
                    .map_err(|e| Error::invalid("array.sigma_mismatch_off", e.to_string()))?;
                (0..cfg.n_pixels)
                    .map(|i| {
                        let mut rng = Xoshiro256PlusPlus::seed_from_u64(stream_seed(
                            cfg.base_seed,
                            i as u64,
                            THRESHOLD_STREAM,
                        ));
                        (on.sample(&mut rng), off.sample(&mut rng))
                    })
                    .collect()
            }
        }
    };
    let clamped = thetas
        .iter()
        .filter(|(on, off)| *on < THRESHOLD_FLOOR || *off < THRESHOLD_FLOOR)
        .count();
    if clamped * 1000 > cfg.n_pixels {
        return Err(Error::ThresholdClamping {
            clamped,
            n_pixels: cfg.n_pixels,
            floor: THRESHOLD_FLOOR,
        });
    }
    Ok(thetas
        .into_iter()
        .map(|(on, off)| (on.max(THRESHOLD_FLOOR), off.max(THRESHOLD_FLOOR)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayResult {
    /// `streams[i].pixel_id == i`.
    pub streams: Vec<EventStream>,
    pub sampled_thetas: Vec<(f64, f64)>,
}

impl ArrayResult {
    /// `pixel_id,theta_on,theta_off` rows.
    pub fn write_thresholds_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "pixel_id,theta_on,theta_off")?;
        for (i, (on, off)) in self.sampled_thetas.iter().enumerate() {
            writeln!(out, "{i},{on},{off}")?;
        }
        Ok(())
    }
}

pub fn simulate_array(input: &TimeSeries, cfg: &ArrayConfig) -> Result<ArrayResult> {
    cfg.validate()?;
    let log = LogSignal::from_photocurrent(input, cfg.base.dark_current_a)?;
    simulate_array_log(&log, cfg)
}

/// Run every pixel of the array on a shared log signal. Pixels are simulated
/// in parallel and merged by index.
pub fn simulate_array_log(log: &LogSignal, cfg: &ArrayConfig) -> Result<ArrayResult> {
    let sampled_thetas = sample_thresholds(cfg)?;
    let streams = sampled_thetas
        .par_iter()
        .enumerate()
        .map(|(i, &thetas)| {
            simulate_log(log, &cfg.pixel_config(i, thetas), i as u32).map_err(|e| Error::Pixel {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ArrayResult {
        streams,
        sampled_thetas,
    })
}
