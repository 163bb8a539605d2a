//! Step-response probability curves (S-curves) and threshold estimators.
//!
//! A curve holds, per stimulus contrast, how many trials were run and in how
//! many of them the pixel responded. Scoring is binary per trial: a window
//! with one event and a window with five both count once, so probabilities
//! stay in `[0, 1]` by construction.
//!
//! Two estimators are provided: the nominal contrast threshold (50% point of
//! a least-squares Gaussian-CDF fit, [`nct`]) and the onset of the sustained
//! 100% plateau ([`theta_100`]).

use std::io::{BufRead, Write};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::array::{simulate_array_log, ArrayConfig, ArrayResult};
use crate::error::{Error, Result};
use crate::pixel::{EventStream, LogSignal, Polarity};
use crate::signal::{
    make_rptp_train, make_square_wave, positive, square_wave_windows, ContrastSweep,
    PhotometryConfig, RpTpSpec, SquareWaveSpec, TimeSeries, TrialWindow,
};

/// Trial count at and above which `epsilon` defaults to 0.005.
pub const FULL_EPSILON_TRIALS: u64 = 200;
pub const DEFAULT_EPSILON: f64 = 0.005;
pub const DEFAULT_WINDOW_S: f64 = 0.040;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountingMode {
    /// Edge of the tested polarity up to the next opposite edge.
    SquareWavePerEdge,
    /// Fixed window from each test-pulse leading edge.
    RptpWindow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CountingRule {
    pub mode: CountingMode,
    /// Window length for [`CountingMode::RptpWindow`].
    pub window_s: f64,
}

impl CountingRule {
    pub fn square_wave() -> Self {
        Self {
            mode: CountingMode::SquareWavePerEdge,
            window_s: DEFAULT_WINDOW_S,
        }
    }

    pub fn rptp(window_s: f64) -> Self {
        Self {
            mode: CountingMode::RptpWindow,
            window_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == CountingMode::RptpWindow {
            positive("counting.window_s", self.window_s)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stimulus {
    SquareWave(SquareWaveSpec),
    RpTp(RpTpSpec),
}

impl Stimulus {
    pub fn kind(&self) -> &'static str {
        match self {
            Stimulus::SquareWave(_) => "square-wave",
            Stimulus::RpTp(_) => "rptp",
        }
    }

    pub fn baseline_lux(&self) -> f64 {
        match self {
            Stimulus::SquareWave(s) => s.baseline_lux,
            Stimulus::RpTp(s) => s.baseline_lux,
        }
    }

    /// Waveform and scored windows at one contrast.
    pub fn render(
        &self,
        linear_contrast: f64,
        polarity: Polarity,
        rule: &CountingRule,
        dt_s: f64,
    ) -> Result<(TimeSeries, Vec<TrialWindow>)> {
        match (self, rule.mode) {
            (Stimulus::SquareWave(spec), CountingMode::SquareWavePerEdge) => {
                let spec = SquareWaveSpec {
                    linear_contrast,
                    ..spec.clone()
                };
                Ok((
                    make_square_wave(&spec, dt_s)?,
                    square_wave_windows(&spec, dt_s, polarity)?,
                ))
            }
            (Stimulus::RpTp(spec), CountingMode::RptpWindow) => {
                let spec = RpTpSpec {
                    test_linear_contrast: linear_contrast,
                    polarity_under_test: polarity,
                    ..spec.clone()
                };
                make_rptp_train(&spec, dt_s, rule.window_s)
            }
            (stim, mode) => Err(Error::invalid(
                "counting.mode",
                format!("{mode:?} cannot score a {} stimulus", stim.kind()),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScurvePoint {
    pub linear_contrast: f64,
    pub log_contrast: f64,
    pub n_trials: u64,
    pub n_responses: u64,
    pub probability: f64,
}

impl ScurvePoint {
    pub fn new(linear_contrast: f64, n_trials: u64, n_responses: u64) -> Result<Self> {
        if n_trials == 0 {
            return Err(Error::invalid("n_trials", "must be >= 1"));
        }
        if n_responses > n_trials {
            return Err(Error::invalid(
                "n_responses",
                format!("{n_responses} responses exceed {n_trials} trials"),
            ));
        }
        if !(linear_contrast.is_finite() && linear_contrast >= 0.0) {
            return Err(Error::invalid(
                "linear_contrast",
                format!("must be finite and >= 0, got {linear_contrast}"),
            ));
        }
        Ok(Self {
            linear_contrast,
            log_contrast: linear_contrast.ln_1p(),
            n_trials,
            n_responses,
            probability: n_responses as f64 / n_trials as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CurveMeta {
    pub stimulus: String,
    pub baseline_lux: f64,
    pub digest: String,
    /// Per point, trials whose window opened while the pixel was still
    /// refractory from an earlier event. Empty when unknown.
    pub refractory_overlaps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SCurve {
    points: Vec<ScurvePoint>,
    pub polarity: Polarity,
    pub meta: CurveMeta,
}

impl SCurve {
    pub fn new(points: Vec<ScurvePoint>, polarity: Polarity, meta: CurveMeta) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("points", "curve needs at least one point"));
        }
        if points
            .windows(2)
            .any(|w| w[1].linear_contrast <= w[0].linear_contrast)
        {
            return Err(Error::invalid(
                "points",
                "contrasts must be strictly increasing",
            ));
        }
        Ok(Self {
            points,
            polarity,
            meta,
        })
    }

    pub fn points(&self) -> &[ScurvePoint] {
        &self.points
    }

    pub fn log_contrasts(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.log_contrast)
    }

    pub fn probabilities(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.probability)
    }

    pub fn min_trials(&self) -> u64 {
        self.points.iter().map(|p| p.n_trials).min().unwrap_or(0)
    }

    pub fn max_probability(&self) -> f64 {
        self.probabilities().fold(0.0, f64::max)
    }

    /// `linear_contrast,log_contrast,n_trials,n_responses,probability`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "linear_contrast,log_contrast,n_trials,n_responses,probability"
        )?;
        for p in &self.points {
            writeln!(
                out,
                "{},{},{},{},{}",
                p.linear_contrast, p.log_contrast, p.n_trials, p.n_responses, p.probability
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is UTF-8")
    }

    /// Parse the curve CSV. `log_contrast` and `probability` are recomputed
    /// from the counts and checked against the file.
    pub fn read_csv<R: BufRead>(
        input: R,
        source: &str,
        polarity: Polarity,
        meta: CurveMeta,
    ) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let header = reader.headers().map_err(|e| csv_error(source, &e))?.clone();
        let expected = [
            "linear_contrast",
            "log_contrast",
            "n_trials",
            "n_responses",
            "probability",
        ];
        if header.iter().ne(expected.iter().copied()) {
            return Err(Error::Parse {
                path: source.into(),
                line: 1,
                message: format!("expected header {}", expected.join(",")),
            });
        }
        let mut points = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(source, &e))?;
            let line = record.position().map_or(0, |p| p.line());
            let bad = |message: String| Error::Parse {
                path: source.into(),
                line,
                message,
            };
            let field = |i: usize| record.get(i).unwrap_or("");
            let num = |i: usize| -> Result<f64> {
                field(i)
                    .parse::<f64>()
                    .map_err(|e| bad(format!("column {}: {e}", expected[i])))
            };
            let int = |i: usize| -> Result<u64> {
                field(i)
                    .parse::<u64>()
                    .map_err(|e| bad(format!("column {}: {e}", expected[i])))
            };
            let point =
                ScurvePoint::new(num(0)?, int(2)?, int(3)?).map_err(|e| bad(e.to_string()))?;
            if (point.probability - num(4)?).abs() > 1e-9
                || (point.log_contrast - num(1)?).abs() > 1e-9
            {
                return Err(bad(
                    "log_contrast/probability disagree with contrast and counts".into(),
                ));
            }
            points.push(point);
        }
        Self::new(points, polarity, meta).map_err(|e| Error::Parse {
            path: source.into(),
            line: 0,
            message: e.to_string(),
        })
    }
}

pub(crate) fn csv_error(source: &str, e: &csv::Error) -> Error {
    Error::Parse {
        path: source.into(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

/// Everything needed to simulate one S-curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// Stimulus template; its contrast is replaced by each sweep value.
    pub stimulus: Stimulus,
    pub sweep: ContrastSweep,
    /// A single pixel is `ArrayConfig::single`.
    pub array: ArrayConfig,
    pub photometry: PhotometryConfig,
    pub rule: CountingRule,
    pub polarity: Polarity,
}

impl Measurement {
    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        self.photometry.validate()?;
        self.rule.validate()?;
        if self.sweep.is_empty() {
            return Err(Error::invalid(
                "sweep",
                "must contain at least one contrast",
            ));
        }
        Ok(())
    }

    /// Short hex digest identifying this configuration.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(format!("{self:?}").as_bytes());
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn meta(&self) -> CurveMeta {
        CurveMeta {
            stimulus: self.stimulus.kind().to_string(),
            baseline_lux: self.stimulus.baseline_lux(),
            digest: self.digest(),
            refractory_overlaps: Vec::new(),
        }
    }
}

/// Simulation output at one sweep contrast, kept so that the same runs can be
/// scored directly or exported as a recorded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastRun {
    pub linear_contrast: f64,
    pub baseline_lux: f64,
    /// Scored windows, already restricted to those after warm-up.
    pub windows: Vec<TrialWindow>,
    pub result: ArrayResult,
    pub duration_s: f64,
    pub refractory_s: f64,
}

/// Simulate every sweep contrast. Contrast `k` uses noise realization `k` of
/// the array, so all points share one threshold draw.
pub fn simulate_sweep(m: &Measurement) -> Result<Vec<ContrastRun>> {
    m.validate()?;
    let dt = m.array.base.dt_s;
    let warmup = m.array.base.warmup_s;
    m.sweep
        .linear_contrasts()
        .par_iter()
        .enumerate()
        .map(|(k, &c)| {
            let (lux, windows) = m.stimulus.render(c, m.polarity, &m.rule, dt)?;
            let log = LogSignal::from_series(&lux, &m.photometry, m.array.base.dark_current_a)?;
            drop(lux);
            let array = ArrayConfig {
                run: k as u64,
                ..m.array.clone()
            };
            let result = simulate_array_log(&log, &array)?;
            let windows: Vec<TrialWindow> = windows
                .into_iter()
                .filter(|w| w.start_s >= warmup)
                .collect();
            Ok(ContrastRun {
                linear_contrast: c,
                baseline_lux: m.stimulus.baseline_lux(),
                windows,
                result,
                duration_s: log.duration_s(),
                refractory_s: (m.array.base.refractory_samples() + 1) as f64 * dt,
            })
        })
        .collect()
}

/// Binary per-window scoring of simulated runs.
pub fn score_runs(runs: &[ContrastRun], polarity: Polarity, mut meta: CurveMeta) -> Result<SCurve> {
    if runs.is_empty() {
        return Err(Error::invalid(
            "sweep",
            "must contain at least one contrast",
        ));
    }
    let mut overlaps_per_point = Vec::with_capacity(runs.len());
    let points = runs
        .iter()
        .map(|run| {
            let mut responses = 0u64;
            let mut overlaps = 0u64;
            for stream in &run.result.streams {
                responses += count_responsive(stream, polarity, &run.windows);
                overlaps += count_refractory_overlaps(stream, &run.windows, run.refractory_s);
            }
            let trials = (run.windows.len() * run.result.streams.len()) as u64;
            overlaps_per_point.push(overlaps);
            ScurvePoint::new(run.linear_contrast, trials, responses)
        })
        .collect::<Result<Vec<_>>>()?;
    meta.refractory_overlaps = overlaps_per_point;
    SCurve::new(points, polarity, meta)
}

/// Simulate and score one S-curve.
pub fn measure_scurve(m: &Measurement) -> Result<SCurve> {
    let runs = simulate_sweep(m)?;
    score_runs(&runs, m.polarity, m.meta())
}

fn count_responsive(stream: &EventStream, polarity: Polarity, windows: &[TrialWindow]) -> u64 {
    let times: Vec<f64> = stream
        .events
        .iter()
        .filter(|e| e.polarity == polarity)
        .map(|e| e.t_s)
        .collect();
    windows
        .iter()
        .filter(|w| {
            let i = times.partition_point(|&t| t < w.start_s);
            i < times.len() && times[i] < w.end_s
        })
        .count() as u64
}

fn count_refractory_overlaps(stream: &EventStream, windows: &[TrialWindow], dead_s: f64) -> u64 {
    windows
        .iter()
        .filter(|w| {
            let i = stream.events.partition_point(|e| e.t_s < w.start_s);
            i > 0 && stream.events[i - 1].t_s + dead_s > w.start_s
        })
        .count() as u64
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Least-squares fit of `p(x) = Phi((x - mu) / sigma)` over log contrast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussFit {
    pub mu: f64,
    pub sigma: f64,
    /// Asymptotic standard errors from `s^2 (J^T J)^-1`; NaN when the
    /// residual variance is undefined (fewer than three points).
    pub mu_se: f64,
    pub sigma_se: f64,
    pub sse: f64,
}

const GRID_MU: usize = 201;
const GRID_SIGMA: usize = 61;
const FIT_RTOL: f64 = 1e-6;
const FIT_MAX_ITER: usize = 500;

/// Fit a Gaussian CDF to the curve: a coarse grid search over `(mu, sigma)`
/// followed by Levenberg-Marquardt refinement in `(mu, ln sigma)`. Sigma is
/// bounded below by `1e-4` of the contrast span. All points weigh equally.
pub fn fit_gaussian_cdf(curve: &SCurve) -> Result<GaussFit> {
    let xs: Vec<f64> = curve.log_contrasts().collect();
    let ps: Vec<f64> = curve.probabilities().collect();
    if ps.iter().all(|&p| p == 0.0) {
        return Err(Error::DegenerateFit("all probabilities are 0"));
    }
    if ps.iter().all(|&p| p == 1.0) {
        return Err(Error::DegenerateFit("all probabilities are 1"));
    }
    let interior = ps.iter().filter(|&&p| p > 0.0 && p < 1.0).count();
    let below = ps.iter().any(|&p| p < 0.5);
    let above = ps.iter().any(|&p| p > 0.5);
    if interior < 3 && !(below && above) {
        return Err(Error::DegenerateFit(
            "need three interior points or points on both sides of 0.5",
        ));
    }
    let x_min = xs[0];
    let x_max = xs[xs.len() - 1];
    let span = (x_max - x_min).max(1e-6);
    let sigma_floor = span * 1e-4;
    let sigma_ceil = span * 2.0;

    let sse = |mu: f64, sigma: f64| -> f64 {
        xs.iter()
            .zip(&ps)
            .map(|(&x, &p)| (norm_cdf((x - mu) / sigma) - p).powi(2))
            .sum()
    };

    // coarse grid
    let mut best = (f64::INFINITY, x_min, sigma_ceil);
    for i in 0..GRID_MU {
        let mu = x_min + span * i as f64 / (GRID_MU - 1) as f64;
        for j in 0..GRID_SIGMA {
            let t = j as f64 / (GRID_SIGMA - 1) as f64;
            let sigma = sigma_floor * (sigma_ceil / sigma_floor).powf(t);
            let s = sse(mu, sigma);
            if s < best.0 {
                best = (s, mu, sigma);
            }
        }
    }

    // Levenberg-Marquardt in (mu, ln sigma)
    let (mut cost, mut mu, mut sigma) = best;
    let ln_floor = sigma_floor.ln();
    let mut lambda = 1e-3;
    for _ in 0..FIT_MAX_ITER {
        let (mut a11, mut a12, mut a22, mut g1, mut g2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &p) in xs.iter().zip(&ps) {
            let z = (x - mu) / sigma;
            let r = norm_cdf(z) - p;
            let d = norm_pdf(z);
            let j_mu = -d / sigma;
            let j_ls = -d * z;
            a11 += j_mu * j_mu;
            a12 += j_mu * j_ls;
            a22 += j_ls * j_ls;
            g1 += j_mu * r;
            g2 += j_ls * r;
        }
        let mut improved = false;
        let mut converged = false;
        while lambda < 1e12 {
            let b11 = a11 * (1.0 + lambda) + 1e-300;
            let b22 = a22 * (1.0 + lambda) + 1e-300;
            let det = b11 * b22 - a12 * a12;
            if !(det.is_finite() && det > 0.0) {
                lambda *= 10.0;
                continue;
            }
            let d_mu = -(b22 * g1 - a12 * g2) / det;
            let d_ls = -(b11 * g2 - a12 * g1) / det;
            let new_mu = mu + d_mu;
            let new_sigma = (sigma.ln() + d_ls).max(ln_floor).exp();
            let new_cost = sse(new_mu, new_sigma);
            if new_cost <= cost {
                converged = (new_mu - mu).abs() <= FIT_RTOL * (mu.abs() + span)
                    && (new_sigma - sigma).abs() <= FIT_RTOL * sigma;
                mu = new_mu;
                sigma = new_sigma;
                cost = new_cost;
                lambda = (lambda * 0.1).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved || converged {
            break;
        }
    }

    let (mu_se, sigma_se) = standard_errors(&xs, cost, mu, sigma);
    Ok(GaussFit {
        mu,
        sigma,
        mu_se,
        sigma_se,
        sse: cost,
    })
}

fn standard_errors(xs: &[f64], sse: f64, mu: f64, sigma: f64) -> (f64, f64) {
    let n = xs.len();
    if n <= 2 {
        return (f64::NAN, f64::NAN);
    }
    let (mut a11, mut a12, mut a22) = (0.0, 0.0, 0.0);
    for &x in xs {
        let z = (x - mu) / sigma;
        let d = norm_pdf(z);
        let j_mu = -d / sigma;
        let j_sigma = -d * z / sigma;
        a11 += j_mu * j_mu;
        a12 += j_mu * j_sigma;
        a22 += j_sigma * j_sigma;
    }
    let det = a11 * a22 - a12 * a12;
    let s2 = sse / (n - 2) as f64;
    if !(det > 0.0) {
        return (f64::INFINITY, f64::INFINITY);
    }
    ((s2 * a22 / det).sqrt(), (s2 * a11 / det).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NctEstimate {
    pub value: f64,
    pub fit: Option<GaussFit>,
    /// The value comes from interpolating the first upward 0.5 crossing
    /// because the fit was unusable.
    pub fallback: bool,
    /// The first point already sits at or above 0.5.
    pub saturated_left: bool,
}

/// Nominal contrast threshold: the fitted Gaussian mean, or the linearly
/// interpolated first upward 0.5 crossing when the fit is degenerate or its
/// mean lies outside the sweep.
pub fn nct(curve: &SCurve) -> Result<NctEstimate> {
    let max = curve.max_probability();
    if max < 0.5 {
        return Err(Error::NoCrossing {
            max_probability: max,
        });
    }
    let (crossing, saturated_left) = first_crossing(curve, 0.5);
    let pts = curve.points();
    let (lo, hi) = (pts[0].log_contrast, pts[pts.len() - 1].log_contrast);
    match fit_gaussian_cdf(curve) {
        Ok(fit) if fit.mu >= lo && fit.mu <= hi && fit.mu.is_finite() => Ok(NctEstimate {
            value: fit.mu,
            fit: Some(fit),
            fallback: false,
            saturated_left,
        }),
        fit => Ok(NctEstimate {
            value: crossing,
            fit: fit.ok(),
            fallback: true,
            saturated_left,
        }),
    }
}

/// Log contrast of the first upward crossing of `level`, interpolated
/// linearly between grid points.
fn first_crossing(curve: &SCurve, level: f64) -> (f64, bool) {
    let pts = curve.points();
    let k = pts
        .iter()
        .position(|p| p.probability >= level)
        .unwrap_or(pts.len() - 1);
    if k == 0 {
        return (pts[0].log_contrast, true);
    }
    (interpolate(&pts[k - 1], &pts[k], level), false)
}

fn interpolate(a: &ScurvePoint, b: &ScurvePoint, level: f64) -> f64 {
    let dp = b.probability - a.probability;
    if dp <= 0.0 {
        return b.log_contrast;
    }
    a.log_contrast + (level - a.probability) / dp * (b.log_contrast - a.log_contrast)
}

/// Probability margin for the 100% plateau.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Epsilon {
    /// 0.005 when every point has at least 200 trials, else `1 / min_trials`.
    #[default]
    Auto,
    Fixed(f64),
}

impl Epsilon {
    pub fn resolve(self, curve: &SCurve) -> Result<f64> {
        let n = curve.min_trials();
        let floor = if n >= FULL_EPSILON_TRIALS {
            0.0
        } else {
            1.0 / n as f64
        };
        match self {
            Epsilon::Auto => Ok(if n >= FULL_EPSILON_TRIALS {
                DEFAULT_EPSILON
            } else {
                floor
            }),
            Epsilon::Fixed(eps) => {
                if !(eps > 0.0 && eps < 0.5) {
                    return Err(Error::invalid(
                        "epsilon",
                        format!("must lie in (0, 0.5), got {eps}"),
                    ));
                }
                if eps < floor {
                    return Err(Error::invalid(
                        "epsilon",
                        format!("{eps} is below 1/n_trials = {floor} for {n} trials"),
                    ));
                }
                Ok(eps)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta100 {
    pub value: f64,
    pub epsilon: f64,
    /// The plateau already holds at the lowest contrast.
    pub saturated_left: bool,
}

/// Onset of the sustained plateau: the smallest contrast from which every
/// point up to the end of the sweep has probability `>= 1 - epsilon`,
/// interpolated linearly against the preceding grid point.
pub fn theta_100(curve: &SCurve, epsilon: Epsilon) -> Result<Theta100> {
    theta_100_at(curve, epsilon.resolve(curve)?)
}

fn theta_100_at(curve: &SCurve, epsilon: f64) -> Result<Theta100> {
    let level = 1.0 - epsilon;
    let pts = curve.points();
    let plateau = pts
        .iter()
        .rposition(|p| p.probability < level)
        .map_or(0, |i| i + 1);
    if plateau == pts.len() {
        return Err(Error::NeverReachesOne { level });
    }
    if plateau == 0 {
        return Ok(Theta100 {
            value: pts[0].log_contrast,
            epsilon,
            saturated_left: true,
        });
    }
    Ok(Theta100 {
        value: interpolate(&pts[plateau - 1], &pts[plateau], level),
        epsilon,
        saturated_left: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EstimateFlags {
    pub saturated_left: bool,
    pub never_reaches_one: bool,
    pub no_crossing: bool,
    pub nct_fallback: bool,
}

impl EstimateFlags {
    /// `|`-separated flag names, empty when none are set.
    pub fn render(&self) -> String {
        let mut out = Vec::new();
        for (set, name) in [
            (self.saturated_left, "saturated-left"),
            (self.never_reaches_one, "never-reaches-one"),
            (self.no_crossing, "no-crossing"),
            (self.nct_fallback, "nct-fallback"),
        ] {
            if set {
                out.push(name);
            }
        }
        out.join("|")
    }

    pub fn parse(s: &str) -> Option<Self> {
        let mut flags = Self::default();
        for name in s.split('|').filter(|n| !n.is_empty()) {
            match name {
                "saturated-left" => flags.saturated_left = true,
                "never-reaches-one" => flags.never_reaches_one = true,
                "no-crossing" => flags.no_crossing = true,
                "nct-fallback" => flags.nct_fallback = true,
                _ => return None,
            }
        }
        Some(flags)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdEstimate {
    pub polarity: Polarity,
    pub nct_50: Option<f64>,
    pub gauss_mu: Option<f64>,
    pub gauss_sigma: Option<f64>,
    pub gauss_mu_se: Option<f64>,
    pub theta_100: Option<f64>,
    pub epsilon: f64,
    pub flags: EstimateFlags,
}

/// Run both estimators. Failures become flags rather than errors.
///
/// A fitted mean beyond the plateau onset contradicts the data (the curve is
/// already at 100% there), so the NCT falls back to the interpolated 0.5
/// crossing in that case; this keeps `nct_50 <= theta_100` on monotone curves.
pub fn estimate(curve: &SCurve, epsilon: Epsilon) -> Result<ThresholdEstimate> {
    let mut flags = EstimateFlags::default();
    let eps = epsilon.resolve(curve)?;
    let t100 = match theta_100_at(curve, eps) {
        Ok(t) => {
            flags.saturated_left |= t.saturated_left;
            Some(t.value)
        }
        Err(Error::NeverReachesOne { .. }) => {
            flags.never_reaches_one = true;
            None
        }
        Err(e) => return Err(e),
    };
    let (nct_50, fit) = match nct(curve) {
        Ok(mut n) => {
            if let (Some(t), false) = (t100, n.fallback) {
                if n.value > t {
                    n.value = first_crossing(curve, 0.5).0;
                    n.fallback = true;
                }
            }
            flags.nct_fallback = n.fallback;
            flags.saturated_left |= n.saturated_left;
            (Some(n.value), n.fit)
        }
        Err(Error::NoCrossing { .. }) => {
            flags.no_crossing = true;
            (None, fit_gaussian_cdf(curve).ok())
        }
        Err(e) => return Err(e),
    };
    Ok(ThresholdEstimate {
        polarity: curve.polarity,
        nct_50,
        gauss_mu: fit.map(|f| f.mu),
        gauss_sigma: fit.map(|f| f.sigma),
        gauss_mu_se: fit.map(|f| f.mu_se),
        theta_100: t100,
        epsilon: eps,
        flags,
    })
}

pub const ESTIMATE_HEADER: &str = "polarity,nct_50,gauss_mu,gauss_sigma,theta_100,epsilon,flags";

/// Estimate summary rows: `polarity,nct_50,gauss_mu,gauss_sigma,theta_100,epsilon,flags`.
/// Undefined values are written as empty fields.
pub fn write_estimates_csv<W: Write>(
    estimates: &[ThresholdEstimate],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "{ESTIMATE_HEADER}")?;
    for e in estimates {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.polarity,
            opt(e.nct_50),
            opt(e.gauss_mu),
            opt(e.gauss_sigma),
            opt(e.theta_100),
            e.epsilon,
            e.flags.render()
        )?;
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Parse an estimate summary written by [`write_estimates_csv`].
pub fn read_estimates_csv<R: BufRead>(input: R, source: &str) -> Result<Vec<ThresholdEstimate>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader.headers().map_err(|e| csv_error(source, &e))?.clone();
    if header.iter().ne(ESTIMATE_HEADER.split(',')) {
        return Err(Error::Parse {
            path: source.into(),
            line: 1,
            message: format!("expected header {ESTIMATE_HEADER}"),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(source, &e))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse {
            path: source.into(),
            line,
            message,
        };
        let opt_num = |i: usize| -> Result<Option<f64>> {
            match record.get(i).unwrap_or("") {
                "" => Ok(None),
                s => s
                    .parse()
                    .map(Some)
                    .map_err(|e| bad(format!("column {i}: {e}"))),
            }
        };
        let polarity = match record.get(0).unwrap_or("") {
            "on" => Polarity::On,
            "off" => Polarity::Off,
            other => return Err(bad(format!("unknown polarity `{other}`"))),
        };
        let flags = EstimateFlags::parse(record.get(6).unwrap_or(""))
            .ok_or_else(|| bad("unknown flag".into()))?;
        out.push(ThresholdEstimate {
            polarity,
            nct_50: opt_num(1)?,
            gauss_mu: opt_num(2)?,
            gauss_sigma: opt_num(3)?,
            gauss_mu_se: None,
            theta_100: opt_num(4)?,
            epsilon: opt_num(5)?.ok_or_else(|| bad("missing epsilon".into()))?,
            flags,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve_from(points: &[(f64, u64, u64)]) -> SCurve {
        SCurve::new(
            points
                .iter()
                .map(|&(c, n, k)| ScurvePoint::new(c, n, k).unwrap())
                .collect(),
            Polarity::On,
            CurveMeta::default(),
        )
        .unwrap()
    }

    /// Curve whose probabilities are given directly on a log-contrast grid.
    fn curve_from_probs(xs: &[f64], ps: &[f64], trials: u64) -> SCurve {
        SCurve::new(
            xs.iter()
                .zip(ps)
                .map(|(&x, &p)| {
                    let mut pt = ScurvePoint::new(x.exp_m1(), trials, 0).unwrap();
                    pt.log_contrast = x;
                    pt.probability = p;
                    pt
                })
                .collect(),
            Polarity::On,
            CurveMeta::default(),
        )
        .unwrap()
    }

    fn default_grid() -> Vec<f64> {
        ContrastSweep::default()
            .linear_contrasts()
            .iter()
            .map(|c| c.ln_1p())
            .collect()
    }

    fn step_curve(theta: f64) -> SCurve {
        let xs = default_grid();
        let ps: Vec<f64> = xs
            .iter()
            .map(|&x| if x > theta { 1.0 } else { 0.0 })
            .collect();
        curve_from_probs(&xs, &ps, 100)
    }

    #[test]
    fn norm_cdf_reference_values() {
        // reference values of the standard normal CDF
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((norm_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((norm_cdf(-1.96) - 0.024_997_895_148_220_43).abs() < 1e-15);
        assert!((norm_cdf(-6.0) - 9.865_876_450_376_98e-10).abs() < 1e-22);
    }

    #[test]
    fn probability_arithmetic() {
        let c = curve_from(&[(0.1, 100, 63)]);
        assert_eq!(c.points()[0].probability, 0.63);
        assert!(ScurvePoint::new(0.1, 0, 0).is_err());
        assert!(ScurvePoint::new(0.1, 10, 11).is_err());
    }

    #[test]
    fn fit_recovers_exact_gaussian() {
        let xs: Vec<f64> = (0..30).map(|i| 0.01 + 0.02 * i as f64).collect();
        let ps: Vec<f64> = xs.iter().map(|&x| norm_cdf((x - 0.25) / 0.05)).collect();
        let fit = fit_gaussian_cdf(&curve_from_probs(&xs, &ps, 100)).unwrap();
        assert!((fit.mu - 0.25).abs() < 1e-4, "{fit:?}");
        assert!((fit.sigma - 0.05).abs() < 1e-4, "{fit:?}");
        assert!(fit.sse < 1e-12);
    }

    #[test]
    fn fit_on_step_collapses_sigma() {
        let fit = fit_gaussian_cdf(&step_curve(0.3)).unwrap();
        let xs = default_grid();
        let below = xs
            .iter()
            .cloned()
            .filter(|&x| x <= 0.3)
            .fold(f64::MIN, f64::max);
        let above = xs.iter().cloned().find(|&x| x > 0.3).unwrap();
        assert!(fit.mu > below && fit.mu < above, "{fit:?}");
        assert!(fit.sigma < above - below, "{fit:?}");
    }

    #[test]
    fn fit_rejects_flat_curves() {
        let xs = default_grid();
        for v in [0.0, 1.0] {
            let c = curve_from_probs(&xs, &vec![v; xs.len()], 100);
            assert!(matches!(fit_gaussian_cdf(&c), Err(Error::DegenerateFit(_))));
        }
    }

    #[test]
    fn nct_of_step_and_gaussian() {
        let step = nct(&step_curve(0.3)).unwrap();
        assert!((step.value - 0.3).abs() < 0.018, "{step:?}");
        let xs = default_grid();
        let ps: Vec<f64> = xs.iter().map(|&x| norm_cdf((x - 0.2) / 0.1)).collect();
        let g = nct(&curve_from_probs(&xs, &ps, 100)).unwrap();
        assert!((g.value - 0.2).abs() < 1e-6);
        assert!(!g.fallback);
    }

    #[test]
    fn nct_without_crossing_errors() {
        let xs = default_grid();
        let c = curve_from_probs(&xs, &vec![0.3; xs.len()], 100);
        assert!(matches!(nct(&c), Err(Error::NoCrossing { .. })));
    }

    #[test]
    fn nct_fallback_interpolates() {
        let xs = [0.1, 0.2, 0.3];
        let c = curve_from_probs(&xs, &[0.0, 0.0, 1.0], 10);
        let n = nct(&c).unwrap();
        assert!(n.value > 0.2 && n.value < 0.3);
    }

    #[test]
    fn theta_100_of_step() {
        let t = theta_100(&step_curve(0.3), Epsilon::Auto).unwrap();
        assert!((t.value - 0.3).abs() < 0.018, "{t:?}");
        assert_eq!(t.epsilon, 0.01);
    }

    #[test]
    fn theta_100_requires_sustained_plateau() {
        let xs = [0.1, 0.2, 0.3, 0.4, 0.5];
        // touches 1 at 0.2, dips, then holds from 0.4
        let c = curve_from_probs(&xs, &[0.0, 1.0, 0.8, 1.0, 1.0], 200);
        let t = theta_100(&c, Epsilon::Auto).unwrap();
        assert_eq!(t.epsilon, 0.005);
        let expected = 0.3 + (0.995 - 0.8) / 0.2 * 0.1;
        assert!((t.value - expected).abs() < 1e-12);
        let never = curve_from_probs(&xs, &[0.0, 1.0, 1.0, 1.0, 0.9], 200);
        assert!(matches!(
            theta_100(&never, Epsilon::Auto),
            Err(Error::NeverReachesOne { .. })
        ));
        let saturated = curve_from_probs(&xs, &[1.0; 5], 200);
        assert!(theta_100(&saturated, Epsilon::Auto).unwrap().saturated_left);
    }

    #[test]
    fn epsilon_policy() {
        let xs = [0.1, 0.2];
        let c = curve_from_probs(&xs, &[0.0, 1.0], 50);
        assert_eq!(Epsilon::Auto.resolve(&c).unwrap(), 0.02);
        assert!(Epsilon::Fixed(0.01).resolve(&c).is_err());
        assert!(Epsilon::Fixed(0.05).resolve(&c).is_ok());
        let big = curve_from_probs(&xs, &[0.0, 1.0], 1000);
        assert_eq!(Epsilon::Auto.resolve(&big).unwrap(), 0.005);
        assert!(Epsilon::Fixed(0.001).resolve(&big).is_ok());
    }

    #[test]
    fn estimate_orders_nct_below_theta_100() {
        // a 0.49 shelf followed by a jump to 1 pulls the fit mean past the
        // plateau onset; the estimate falls back to the 0.5 crossing
        let xs: Vec<f64> = (0..12).map(|i| 0.05 * i as f64).collect();
        let mut ps = vec![0.49; 12];
        ps[11] = 1.0;
        let c = curve_from_probs(&xs, &ps, 100);
        let e = estimate(&c, Epsilon::Auto).unwrap();
        assert!(e.nct_50.unwrap() <= e.theta_100.unwrap());
    }

    #[test]
    fn estimates_csv_round_trip() {
        let e = estimate(&step_curve(0.3), Epsilon::Auto).unwrap();
        let mut buf = Vec::new();
        write_estimates_csv(std::slice::from_ref(&e), &mut buf).unwrap();
        let back = read_estimates_csv(&buf[..], "mem").unwrap();
        assert_eq!(back[0].theta_100, e.theta_100);
        assert_eq!(back[0].nct_50, e.nct_50);
        assert_eq!(back[0].flags, e.flags);
    }

    #[test]
    fn curve_csv_round_trip() {
        let c = curve_from(&[(0.01, 100, 0), (0.2, 100, 37), (0.5, 100, 100)]);
        let text = c.to_csv_string();
        let back =
            SCurve::read_csv(text.as_bytes(), "mem", Polarity::On, CurveMeta::default()).unwrap();
        assert_eq!(back.points(), c.points());
        let broken = text.replace(",37,", ",38,");
        match SCurve::read_csv(broken.as_bytes(), "mem", Polarity::On, CurveMeta::default()) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mismatched_rule_is_rejected() {
        let stim = Stimulus::SquareWave(SquareWaveSpec::default());
        assert!(stim
            .render(0.1, Polarity::On, &CountingRule::rptp(0.04), 1e-4)
            .is_err());
    }
}
