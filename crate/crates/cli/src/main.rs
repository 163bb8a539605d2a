//! `evs-scurve`: simulate, measure and analyse event-pixel contrast
//! thresholds.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config or input
//! file contents), 2 runtime error (I/O, calibration or fit failure).

use std::fs::File;
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evs_scurve::experiment::{
    run_plan, Artifacts, EpsilonSetting, ExperimentConfig, ExperimentKind, ExperimentOutcome,
    NoisePlan, PolarityChoice,
};
use evs_scurve::inference::{
    bandwidth_attenuation, calibrate_noise, infer_dark_current, llco_dark_current,
    reference_threshold, write_calibration_csv, CalibrationSetup, DarkCurrentEstimate,
};
use evs_scurve::pixel::Polarity;
use evs_scurve::plot::render_svg;
use evs_scurve::recorded::{ingest_recorded, IngestOptions, RecordedDataset};
use evs_scurve::scurve::{
    estimate, read_estimates_csv, theta_100, write_estimates_csv, CountingRule, CurveMeta, Epsilon,
    SCurve, ThresholdEstimate, DEFAULT_WINDOW_S,
};
use evs_scurve::signal::PhotometryConfig;
use evs_scurve::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "evs-scurve", version, about, propagate_version = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed; overrides the config's `seed`.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output.dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Find the noise level that produces a target background-activity rate.
    CalibrateNoise(CalibrateArgs),
    /// Run an experiment preset and write S-curves, estimates and a summary.
    Scurve(ScurveArgs),
    /// Estimate thresholds from S-curve CSV files.
    Estimate(EstimateArgs),
    /// Infer dark current from an illumination family of S-curves.
    DarkCurrent(DarkCurrentArgs),
    /// Turn recorded events plus a stimulus schedule into S-curves.
    Ingest(IngestArgs),
    /// Render S-curve CSV files as one SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Pixel bandwidth(s) in Hz.
    #[arg(long = "f3db", value_name = "HZ", num_args = 1..)]
    f3db_hz: Vec<f64>,
    /// Target background-activity rate(s) in events/pixel/s.
    #[arg(long = "target-ba", value_name = "HZ", num_args = 1..)]
    target_ba_hz: Vec<f64>,
    /// Independent runs averaged per evaluation.
    #[arg(long)]
    runs: Option<usize>,
    /// Scored duration of each run in seconds.
    #[arg(long, value_name = "S")]
    duration: Option<f64>,
    /// Accepted relative error of the achieved rate.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args, Debug)]
struct ScurveArgs {
    /// Preset to run when no config file is given.
    #[arg(long, value_name = "KIND")]
    kind: Option<String>,
    /// Skip noise calibration and use this per-sample noise level.
    #[arg(long, value_name = "SIGMA")]
    sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// S-curve CSV files.
    #[arg(required = true, value_name = "SCURVE_CSV")]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

#[derive(Args, Debug, Clone)]
struct EstimatorArgs {
    /// Polarity the curves measure.
    #[arg(long, value_enum)]
    polarity: Option<PolarityArg>,
    /// Plateau margin: `auto` or a probability in (0, 0.5).
    #[arg(long)]
    epsilon: Option<String>,
}

#[derive(Args, Debug)]
struct DarkCurrentArgs {
    /// Family curve as `LUX=PATH` (S-curve CSV). Repeat for each baseline.
    #[arg(long = "curve", value_name = "LUX=PATH")]
    curves: Vec<String>,
    /// Bright reference curve as `LUX=PATH`.
    #[arg(long = "reference", value_name = "LUX=PATH")]
    reference: Option<String>,
    /// Lowest illumination at which a doubling of light still fires.
    #[arg(long = "llco-lux", value_name = "LUX")]
    llco_lux: Option<f64>,
    /// ON threshold used with --llco-lux.
    #[arg(long = "theta-on", default_value_t = 0.3)]
    theta_on: f64,
    /// Pixel bandwidth for the finite-window attenuation report.
    #[arg(long = "f3db", value_name = "HZ")]
    f3db_hz: Option<f64>,
    /// Response window for the attenuation report.
    #[arg(long = "window-s", value_name = "S", default_value_t = DEFAULT_WINDOW_S)]
    window_s: f64,
    /// Quantum efficiency.
    #[arg(long)]
    eta: Option<f64>,
    /// Pixel pitch in metres.
    #[arg(long = "pixel-pitch", value_name = "M")]
    pixel_pitch_m: Option<f64>,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Events CSV (t_us, pixel_id, polarity).
    #[arg(long)]
    events: PathBuf,
    /// Schedule CSV (pulse_index, t_start_us, t_end_us, linear_contrast, baseline_lux).
    #[arg(long)]
    schedule: PathBuf,
    /// Number of pixels in the region of interest.
    #[arg(long)]
    roi: Option<usize>,
    /// Camera refractory setting, stored as metadata only.
    #[arg(long = "refractory-setting")]
    refractory_setting: Option<String>,
    /// Counting rule.
    #[arg(long, value_enum, default_value_t = ModeArg::Rptp)]
    mode: ModeArg,
    /// Response window after each pulse onset (rptp mode).
    #[arg(long = "window-s", value_name = "S")]
    window_s: Option<f64>,
    /// Minimum pulses per contrast level.
    #[arg(long = "min-pulses", default_value_t = 20)]
    min_pulses: usize,
    #[command(flatten)]
    estimator: EstimatorArgs,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// S-curve CSV files, optionally as `PATH@LUX` to label by baseline.
    #[arg(required = true, value_name = "SCURVE_CSV")]
    inputs: Vec<String>,
    /// Estimate CSV files; row i adds markers to curve i.
    #[arg(long = "estimates", value_name = "PATH")]
    estimates: Vec<PathBuf>,
    /// Polarity the curves measure.
    #[arg(long, value_enum, default_value_t = PolarityArg::On)]
    polarity: PolarityArg,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum PolarityArg {
    On,
    Off,
}

impl From<PolarityArg> for Polarity {
    fn from(p: PolarityArg) -> Self {
        match p {
            PolarityArg::On => Polarity::On,
            PolarityArg::Off => Polarity::Off,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeArg {
    Rptp,
    SquareWave,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.jobs {
        if n == 0 {
            return Err(Error::invalid("--jobs", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid("--jobs", e.to_string()))?;
    }
    let config = match &cli.common.config {
        Some(path) => Some(ExperimentConfig::load(path)?),
        None => None,
    };
    let common = &cli.common;
    match cli.command {
        Command::CalibrateNoise(a) => calibrate(common, config, a),
        Command::Scurve(a) => scurve(common, config, a),
        Command::Estimate(a) => estimate_cmd(common, config.as_ref(), a),
        Command::DarkCurrent(a) => dark_current(common, config, a),
        Command::Ingest(a) => ingest_cmd(common, config.as_ref(), a),
        Command::Plot(a) => plot(common, a),
    }
}

fn out_dir(common: &Common, config: Option<&ExperimentConfig>) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| config.and_then(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_all(artifacts: &Artifacts, dir: &Path) -> Result<()> {
    artifacts.write_to(dir)?;
    for name in artifacts.files.keys() {
        println!("wrote {}", dir.join(name).display());
    }
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn bytes<F>(f: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io("<memory>", e))?;
    Ok(buf)
}

/// Polarity and epsilon from flags, falling back to the config's estimator
/// section.
fn estimator_settings(
    args: &EstimatorArgs,
    config: Option<&ExperimentConfig>,
) -> Result<(Polarity, Epsilon)> {
    let section = config.map(|c| &c.estimator);
    let polarity = match args.polarity {
        Some(p) => p.into(),
        None => match section.and_then(|s| s.polarity) {
            None | Some(PolarityChoice::On) => Polarity::On,
            Some(PolarityChoice::Off) => Polarity::Off,
            Some(PolarityChoice::Both) => {
                return Err(Error::invalid(
                    "estimator.polarity",
                    "this command reads one polarity; pass --polarity",
                ))
            }
        },
    };
    let setting = match &args.epsilon {
        Some(text) => Some(match text.parse::<f64>() {
            Ok(v) => EpsilonSetting::Value(v),
            Err(_) => EpsilonSetting::Named(text.clone()),
        }),
        None => section.and_then(|s| s.epsilon.clone()),
    };
    let epsilon = match setting {
        None => Epsilon::Auto,
        Some(EpsilonSetting::Named(s)) if s == "auto" => Epsilon::Auto,
        Some(EpsilonSetting::Named(s)) => {
            return Err(Error::invalid(
                "--epsilon",
                format!("expected `auto` or a number, got `{s}`"),
            ))
        }
        Some(EpsilonSetting::Value(v)) if v > 0.0 && v < 0.5 => Epsilon::Fixed(v),
        Some(EpsilonSetting::Value(v)) => {
            return Err(Error::invalid(
                "--epsilon",
                format!("must lie in (0, 0.5), got {v}"),
            ))
        }
    };
    Ok((polarity, epsilon))
}

fn calibrate(common: &Common, config: Option<ExperimentConfig>, a: CalibrateArgs) -> Result<()> {
    let template = match &config {
        Some(cfg) => match cfg.resolve()?.noise {
            NoisePlan::Calibrate(setup) => Some(setup),
            NoisePlan::Sigma(_) => None,
        },
        None => None,
    };
    let f3dbs = if a.f3db_hz.is_empty() {
        template.iter().map(|s| s.f3db_hz).collect()
    } else {
        a.f3db_hz.clone()
    };
    let targets = if a.target_ba_hz.is_empty() {
        template.iter().map(|s| s.target_ba_hz).collect()
    } else {
        a.target_ba_hz.clone()
    };
    if f3dbs.is_empty() || targets.is_empty() {
        return Err(Error::invalid(
            "--f3db/--target-ba",
            "give both, or a config with a noise target",
        ));
    }
    let mut rows = Vec::new();
    for &f in &f3dbs {
        for &target in &targets {
            let base = template
                .clone()
                .unwrap_or_else(|| CalibrationSetup::new(f, target));
            let setup = CalibrationSetup {
                f3db_hz: f,
                target_ba_hz: target,
                n_runs: a.runs.unwrap_or(base.n_runs),
                run_duration_s: a.duration.unwrap_or(base.run_duration_s),
                tolerance: a.tolerance.unwrap_or(base.tolerance),
                seed: common.seed.unwrap_or(base.seed),
                ..base
            };
            let c = calibrate_noise(&setup)?;
            println!(
                "f3db={} Hz target={} Hz sigma={:.5} achieved={:.4} Hz (se {:.4})",
                f, target, c.calibrated_sigma, c.achieved_ba_hz, c.achieved_std_err_hz
            );
            rows.push(c);
        }
    }
    let mut artifacts = Artifacts::default();
    artifacts.insert(
        "calibration.csv",
        bytes(|b| write_calibration_csv(&rows, b))?,
    );
    write_all(&artifacts, &out_dir(common, config.as_ref()))
}

fn preset_config(kind: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(&format!("kind = {kind:?}\n"), "--kind")
}

fn scurve(common: &Common, config: Option<ExperimentConfig>, a: ScurveArgs) -> Result<()> {
    let mut cfg = match (config, &a.kind) {
        (Some(_), Some(_)) => {
            return Err(Error::invalid(
                "--kind",
                "give either --config or --kind, not both",
            ))
        }
        (Some(c), None) => c,
        (None, Some(k)) => preset_config(k)?,
        (None, None) => return Err(Error::invalid("--config", "give --config or --kind")),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if let Some(sigma) = a.sigma {
        cfg.pixel.noise_sigma = Some(sigma);
        cfg.noise = Default::default();
    }
    let plan = cfg.resolve()?;
    let outcome = run_plan(&plan)?;
    let artifacts = outcome.artifacts()?;
    report(&outcome);
    write_all(&artifacts, &out_dir(common, Some(&cfg)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

fn report(outcome: &ExperimentOutcome) {
    println!(
        "experiment {} (seed {})",
        outcome.plan.kind.name(),
        outcome.plan.seed
    );
    if let Some(c) = &outcome.calibration {
        println!(
            "noise: sigma={:.5} achieved BA={:.4} Hz (target {} Hz)",
            c.calibrated_sigma, c.achieved_ba_hz, c.target_ba_hz
        );
    } else {
        println!("noise: sigma={}", outcome.sigma);
    }
    for c in &outcome.curves {
        println!(
            "{:<24} nct_50={} theta_100={} flags={}{}",
            c.label,
            fmt_opt(c.estimate.nct_50),
            fmt_opt(c.estimate.theta_100),
            c.estimate.flags.render(),
            if c.shifted_left { " shifted-left" } else { "" }
        );
    }
    if let Some(d) = &outcome.dark_current {
        println!(
            "dark current: mean={:.4} fA std={:.4} fA",
            d.mean_a * 1e15,
            d.std_a * 1e15
        );
    }
    for c in &outcome.checks {
        println!(
            "[{}] {}: {} (expected {})",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.expected
        );
    }
}

fn read_curve(path: &Path, polarity: Polarity, baseline_lux: f64) -> Result<SCurve> {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let meta = CurveMeta {
        stimulus: stem,
        baseline_lux,
        ..Default::default()
    };
    SCurve::read_csv(open(path)?, &path.display().to_string(), polarity, meta)
}

fn estimate_cmd(common: &Common, config: Option<&ExperimentConfig>, a: EstimateArgs) -> Result<()> {
    let (polarity, epsilon) = estimator_settings(&a.estimator, config)?;
    let mut estimates = Vec::new();
    for path in &a.inputs {
        let curve = read_curve(path, polarity, 0.0)?;
        let e = estimate(&curve, epsilon)?;
        println!(
            "{}: nct_50={} theta_100={} flags={}",
            path.display(),
            fmt_opt(e.nct_50),
            fmt_opt(e.theta_100),
            e.flags.render()
        );
        estimates.push(e);
    }
    let csv = bytes(|b| write_estimates_csv(&estimates, b))?;
    match &common.out {
        Some(dir) => {
            let mut artifacts = Artifacts::default();
            artifacts.insert("estimates.csv", csv);
            write_all(&artifacts, dir)
        }
        None => std::io::stdout()
            .write_all(&csv)
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn lux_path(text: &str, flag: &'static str) -> Result<(f64, PathBuf)> {
    let (lux, path) = text
        .split_once('=')
        .ok_or_else(|| Error::invalid(flag, format!("expected LUX=PATH, got `{text}`")))?;
    let lux: f64 = lux
        .trim()
        .parse()
        .map_err(|_| Error::invalid(flag, format!("`{lux}` is not a number")))?;
    Ok((lux, PathBuf::from(path)))
}

fn dark_current(
    common: &Common,
    config: Option<ExperimentConfig>,
    a: DarkCurrentArgs,
) -> Result<()> {
    let defaults = PhotometryConfig::default();
    let cfg_ph = config.as_ref().map(|c| &c.photometry);
    let photometry = PhotometryConfig {
        eta: a.eta.or(cfg_ph.and_then(|p| p.eta)).unwrap_or(defaults.eta),
        pixel_pitch_m: a
            .pixel_pitch_m
            .or(cfg_ph.and_then(|p| p.pixel_pitch_m))
            .unwrap_or(defaults.pixel_pitch_m),
    };
    photometry.validate()?;
    let mut artifacts = Artifacts::default();

    let family_requested = !a.curves.is_empty() || a.reference.is_some();
    let simulate = !family_requested && (config.is_some() || a.llco_lux.is_none());
    let mut estimate_out: Option<DarkCurrentEstimate> = None;
    if family_requested {
        let (polarity, epsilon) = estimator_settings(&a.estimator, config.as_ref())?;
        let reference = a
            .reference
            .as_deref()
            .ok_or_else(|| Error::invalid("--reference", "required with --curve"))?;
        let plateau = |text: &str, flag: &'static str| -> Result<(f64, f64)> {
            let (lux, path) = lux_path(text, flag)?;
            let curve = read_curve(&path, polarity, lux)?;
            Ok((lux, theta_100(&curve, epsilon)?.value))
        };
        let theta_ref = reference_threshold(&[plateau(reference, "--reference")?])?;
        let family = a
            .curves
            .iter()
            .map(|c| plateau(c, "--curve"))
            .collect::<Result<Vec<_>>>()?;
        estimate_out = Some(infer_dark_current(&family, theta_ref, &photometry)?);
    } else if simulate {
        let mut cfg = config
            .clone()
            .unwrap_or_else(|| ExperimentConfig::preset(ExperimentKind::DarkCurrent));
        if cfg.kind != ExperimentKind::DarkCurrent {
            return Err(Error::invalid(
                "kind",
                format!(
                    "dark-current needs kind = \"dark-current\", got \"{}\"",
                    cfg.kind.name()
                ),
            ));
        }
        if common.seed.is_some() {
            cfg.seed = common.seed;
        }
        cfg.photometry.eta = Some(photometry.eta);
        cfg.photometry.pixel_pitch_m = Some(photometry.pixel_pitch_m);
        let outcome = run_plan(&cfg.resolve()?)?;
        report(&outcome);
        artifacts = outcome.artifacts()?;
        estimate_out = outcome.dark_current.clone();
    }

    if let Some(d) = &estimate_out {
        for p in &d.per_curve {
            println!(
                "{} lx: C={:.4} I_pho1={:.4} fA I_dark={:.4} fA",
                p.baseline_lux,
                p.theta_100_c,
                p.i_pho1_a * 1e15,
                p.i_dark_a * 1e15
            );
        }
        println!(
            "I_dark mean={:.4} fA std={:.4} fA (relative spread {:.3})",
            d.mean_a * 1e15,
            d.std_a * 1e15,
            d.relative_spread()
        );
        artifacts.insert("dark_current.csv", bytes(|b| d.write_csv(b))?);
    }
    if let Some(f) = a.f3db_hz {
        let att = bandwidth_attenuation(f, a.window_s)?;
        println!("attenuation at {f} Hz, {} s window: {att:.7}", a.window_s);
        if let Some(d) = &estimate_out {
            println!(
                "attenuation-corrected lower bound: {:.4} fA",
                d.attenuation_corrected_mean(att) * 1e15
            );
        }
    }
    if let Some(lux) = a.llco_lux {
        let i = llco_dark_current(lux, a.theta_on, &photometry)?;
        println!(
            "LLCO dark current at {lux} lx, theta_on {}: {:.4} fA",
            a.theta_on,
            i * 1e15
        );
    }
    if artifacts.files.is_empty() {
        return Ok(());
    }
    write_all(&artifacts, &out_dir(common, config.as_ref()))
}

fn ingest_cmd(common: &Common, config: Option<&ExperimentConfig>, a: IngestArgs) -> Result<()> {
    let (polarity, epsilon) = estimator_settings(&a.estimator, config)?;
    let window_s = a
        .window_s
        .or(config.and_then(|c| c.counting.window_s))
        .unwrap_or(DEFAULT_WINDOW_S);
    let rule = match a.mode {
        ModeArg::Rptp => CountingRule::rptp(window_s),
        ModeArg::SquareWave => CountingRule::square_wave(),
    };
    let opts = IngestOptions {
        min_pulses: a.min_pulses,
        ..IngestOptions::new(rule, polarity)
    };
    let dataset = RecordedDataset {
        events_path: a.events,
        schedule_path: a.schedule,
        roi_pixels: a.roi,
        refractory_setting: a.refractory_setting,
    };
    let ingested = ingest_recorded(&dataset, &opts)?;
    for w in &ingested.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{} pixels, {} curves",
        ingested.n_pixels,
        ingested.curves.len()
    );
    let mut artifacts = Artifacts::default();
    let mut estimates: Vec<ThresholdEstimate> = Vec::new();
    for curve in &ingested.curves {
        let name = format!("{}lx-{}", curve.meta.baseline_lux, curve.polarity);
        artifacts.insert(
            format!("{name}.scurve.csv"),
            curve.to_csv_string().into_bytes(),
        );
        let e = estimate(curve, epsilon)?;
        println!(
            "{name}: nct_50={} theta_100={} flags={}",
            fmt_opt(e.nct_50),
            fmt_opt(e.theta_100),
            e.flags.render()
        );
        estimates.push(e);
    }
    artifacts.insert(
        "estimates.csv",
        bytes(|b| write_estimates_csv(&estimates, b))?,
    );
    write_all(&artifacts, &out_dir(common, config))
}

fn plot(common: &Common, a: PlotArgs) -> Result<()> {
    let polarity: Polarity = a.polarity.into();
    let mut curves = Vec::new();
    for text in &a.inputs {
        let (path, lux) = match text.rsplit_once('@') {
            Some((p, l)) => {
                let lux = l
                    .parse::<f64>()
                    .map_err(|_| Error::invalid("input", format!("`{l}` is not a number")))?;
                (PathBuf::from(p), lux)
            }
            None => (PathBuf::from(text), 0.0),
        };
        curves.push(read_curve(&path, polarity, lux)?);
    }
    let mut estimates = Vec::new();
    for path in &a.estimates {
        estimates.extend(read_estimates_csv(
            open(path)?,
            &path.display().to_string(),
        )?);
    }
    let mut artifacts = Artifacts::default();
    artifacts.insert("scurves.svg", render_svg(&curves, &estimates).into_bytes());
    write_all(&artifacts, &out_dir(common, None))
}
