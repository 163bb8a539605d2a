//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! fails. Run with `cargo test -p evs-scurve --test acceptance`.

use std::collections::BTreeMap;
use std::time::Instant;

use evs_scurve::array::{ArrayConfig, ThresholdMode};
use evs_scurve::experiment::{
    run_plan_with_sigma, ExperimentConfig, ExperimentKind, ExperimentOutcome,
};
use evs_scurve::inference::{
    bandwidth_attenuation, calibrate_noise, dark_current_multiplier, measure_background_activity,
    CalibrationSetup, NoiseCalibration,
};
use evs_scurve::pixel::{
    lowpass_step, simulate_log, simulate_pixel, LogSignal, PixelConfig, Polarity,
};
use evs_scurve::recorded::{export_runs, ingest, IngestOptions};
use evs_scurve::scurve::{
    estimate, measure_scurve, score_runs, simulate_sweep, CountingRule, CurveMeta, Epsilon,
    Measurement, SCurve, ScurvePoint, Stimulus,
};
use evs_scurve::signal::{
    make_square_wave, ContrastSweep, PhotometryConfig, RpTpSpec, SquareWaveSpec,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

const BANDWIDTHS: [f64; 3] = [2000.0, 200.0, 50.0];
const TARGETS: [f64; 2] = [0.5, 0.02];
const PROPERTY_CASES: u32 = 128;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Calibrated sigma per (bandwidth, target), filled by criterion 2.
type Calibrations = BTreeMap<(u64, u64), NoiseCalibration>;

fn key(f3db: f64, target: f64) -> (u64, u64) {
    (f3db.to_bits(), target.to_bits())
}

fn sigma(cal: &Calibrations, f3db: f64, target: f64) -> f64 {
    cal[&key(f3db, target)].calibrated_sigma
}

fn run(cfg: &ExperimentConfig, sigma: f64) -> ExperimentOutcome {
    let plan = cfg.resolve().expect("preset resolves");
    run_plan_with_sigma(&plan, sigma, None).expect("experiment runs")
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn c1_ideal_step() -> Outcome {
    let start = Instant::now();
    let cfg = ExperimentConfig::preset(ExperimentKind::Ideal);
    let out = run(&cfg, 0.0);
    let elapsed = start.elapsed().as_secs_f64();
    let step = out.plan.grid_step();
    let mut pass = elapsed < 60.0 && out.curves.len() == 4;
    let mut parts = Vec::new();
    for c in &out.curves {
        let exact = c.curve.points().iter().all(|p| {
            (p.log_contrast < 0.3 && p.probability == 0.0)
                || (p.log_contrast > 0.3 && p.probability == 1.0)
        });
        let near = |v: Option<f64>| v.is_some_and(|v| (v - 0.3).abs() <= step);
        pass &= exact && near(c.estimate.nct_50) && near(c.estimate.theta_100);
        parts.push(format!(
            "{} nct={} t100={}{}",
            c.label,
            fmt(c.estimate.nct_50),
            fmt(c.estimate.theta_100),
            if exact { "" } else { " NOT-A-STEP" }
        ));
    }
    outcome(
        pass,
        format!("{}; grid step {step:.4}; {elapsed:.1} s", parts.join(", ")),
    )
}

fn c2_noise_calibration(cal: &mut Calibrations) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for f in BANDWIDTHS {
        for target in TARGETS {
            let setup = CalibrationSetup::new(f, target);
            let c = match calibrate_noise(&setup) {
                Ok(c) => c,
                Err(e) => {
                    pass = false;
                    parts.push(format!("{f}Hz/{target}Hz error: {e}"));
                    continue;
                }
            };
            let rel = (c.achieved_ba_hz - target).abs() / target;
            // fresh noise realisations at the calibrated sigma must agree with
            // the calibration runs within three combined standard errors
            let recheck =
                measure_background_activity(&setup, c.calibrated_sigma, setup.seed ^ 0x5eed)
                    .expect("recheck runs");
            let combined = c.achieved_std_err_hz.hypot(recheck.std_err_hz);
            let consistent = (recheck.mean_hz - c.achieved_ba_hz).abs() <= 3.0 * combined;
            pass &= rel <= 0.10 && consistent;
            parts.push(format!(
                "{f}Hz/{target}Hz sigma={:.4} BA={:.4} ({:+.1}%) recheck={:.4}",
                c.calibrated_sigma,
                c.achieved_ba_hz,
                100.0 * (c.achieved_ba_hz - target) / target,
                recheck.mean_hz
            ));
            cal.insert(key(f, target), c);
        }
    }
    outcome(pass, parts.join("; "))
}

fn c3_nct_left_shift(cal: &Calibrations) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for f in BANDWIDTHS {
        let mut cfg = ExperimentConfig::preset(ExperimentKind::Noise);
        cfg.pixel.f3db_hz = Some(f);
        let out = run(&cfg, sigma(cal, f, 0.5));
        let c = &out.curves[0];
        pass &= c.shifted_left;
        parts.push(format!(
            "{f}Hz nct={} se={}",
            fmt(c.estimate.nct_50),
            c.estimate
                .gauss_mu_se
                .map_or("-".into(), |s| format!("{s:.1e}"))
        ));
    }
    outcome(pass, parts.join(", "))
}

fn c4_low_bandwidth_plateau(cal: &Calibrations) -> Outcome {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::Refractory);
    cfg.pixel.theta_on = Some(0.3);
    let out = run(&cfg, sigma(cal, 50.0, 0.02));
    let t = out.curves[0].estimate.theta_100;
    outcome(
        t.is_some_and(|t| (t - 0.3).abs() <= 0.03),
        format!("theta_100={} (0.30 +/- 0.03)", fmt(t)),
    )
}

fn c5_mismatch(cal: &Calibrations) -> Outcome {
    let s = sigma(cal, 50.0, 0.02);
    let short = run(&ExperimentConfig::preset(ExperimentKind::Mismatch), s);
    let long = run(&ExperimentConfig::preset(ExperimentKind::Refractory), s);
    let t_short = short.curves[0].estimate.theta_100;
    let t_long = long.curves[0].estimate.theta_100;
    let pass =
        t_short.is_some_and(|t| t > 0.33) && t_long.is_some_and(|t| (t - 0.33).abs() <= 0.03);
    outcome(
        pass,
        format!(
            "100us theta_100={} (> 0.33); 10ms theta_100={} (0.33 +/- 0.03)",
            fmt(t_short),
            fmt(t_long)
        ),
    )
}

fn c6_robustness(cal: &Calibrations) -> Outcome {
    let out = run(
        &ExperimentConfig::preset(ExperimentKind::Robustness),
        sigma(cal, 50.0, 0.5),
    );
    let parts: Vec<String> = out
        .checks
        .iter()
        .map(|c| format!("{}: {}", c.name, c.value))
        .collect();
    outcome(out.passed() && out.checks.len() == 3, parts.join("; "))
}

fn c7_filter() -> Outcome {
    let f3db = 50.0;
    let dt = 10e-6;
    let tau = 1.0 / (2.0 * std::f64::consts::PI * f3db);
    let mut y = 0.0;
    let mut prev = 0.0;
    let mut t = 0.0;
    while t < tau {
        prev = y;
        y = lowpass_step(y, 1.0, dt, tau);
        t += dt;
    }
    // linear interpolation between the samples bracketing t = tau
    let at_tau = prev + (y - prev) * (tau - (t - dt)) / dt;
    let ideal = 1.0 - (-1.0f64).exp();
    let step_err = (at_tau - ideal).abs() / ideal;
    let att = bandwidth_attenuation(2.0, 0.040).expect("valid");
    outcome(
        step_err <= 0.01 && (att - 0.395).abs() <= 0.005,
        format!(
            "y(tau)={at_tau:.5} vs {ideal:.5} ({:.3}%); attenuation(2 Hz, 40 ms)={att:.4}",
            100.0 * step_err
        ),
    )
}

fn c8_dark_current(cal: &Calibrations) -> Outcome {
    let out = run(
        &ExperimentConfig::preset(ExperimentKind::DarkCurrent),
        sigma(cal, 50.0, 0.02),
    );
    let m1 = dark_current_multiplier(0.8, 0.35);
    let m2 = dark_current_multiplier(std::f64::consts::LN_2, 0.25);
    let Some(d) = &out.dark_current else {
        return outcome(false, "no dark-current estimate");
    };
    let planted = out.plan.pixel.dark_current_a;
    let rel = (d.mean_a - planted).abs() / planted;
    let spread = d.relative_spread();
    let pass =
        rel <= 0.10 && spread <= 0.10 && (m1 - 1.924).abs() <= 0.001 && (m2 - 2.521).abs() <= 0.001;
    outcome(
        pass,
        format!(
            "mean={:.3} fA (planted {:.1}, {:+.1}%), std/mean={:.3}, multipliers {m1:.4} {m2:.4}",
            d.mean_a * 1e15,
            planted * 1e15,
            100.0 * (d.mean_a - planted) / planted,
            spread
        ),
    )
}

fn runner() -> TestRunner {
    let config = Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn small_measurement(
    rptp: bool,
    sigma: f64,
    n_pixels: usize,
    seed: u64,
    lo: f64,
    n: usize,
    polarity: Polarity,
) -> Measurement {
    let stimulus = if rptp {
        Stimulus::RpTp(RpTpSpec {
            n_pulses: 20,
            ..RpTpSpec::default()
        })
    } else {
        Stimulus::SquareWave(SquareWaveSpec {
            duration_s: 4.3,
            ..SquareWaveSpec::default()
        })
    };
    Measurement {
        rule: if rptp {
            CountingRule::rptp(0.04)
        } else {
            CountingRule::square_wave()
        },
        stimulus,
        sweep: ContrastSweep::linear(lo, lo + 0.3, n).expect("valid sweep"),
        array: ArrayConfig {
            n_pixels,
            base: PixelConfig {
                noise_sigma: sigma,
                f3db_hz: 500.0,
                ..PixelConfig::default()
            },
            sigma_mismatch_on: 0.02,
            sigma_mismatch_off: 0.02,
            base_seed: seed,
            mode: ThresholdMode::Random,
            run: 0,
        },
        photometry: PhotometryConfig::default(),
        polarity,
    }
}

fn polarity() -> impl Strategy<Value = Polarity> {
    prop_oneof![Just(Polarity::On), Just(Polarity::Off)]
}

fn prop_refractory_spacing() -> Result<(), String> {
    let strategy = (
        0.0f64..3e-3,
        0.02f64..0.6,
        50.0f64..5000.0,
        0.05f64..0.5,
        any::<u64>(),
    );
    runner()
        .run(&strategy, |(refr, sigma, f3db, theta, seed)| {
            let cfg = PixelConfig {
                theta_on: theta,
                theta_off: theta,
                f3db_hz: f3db,
                noise_sigma: sigma,
                refractory_s: refr,
                warmup_s: 0.0,
                seed,
                ..PixelConfig::default()
            };
            let log = LogSignal::constant(0.0, 30_000, cfg.dt_s).expect("valid");
            let stream = simulate_log(&log, &cfg, 0).expect("valid");
            let min_gap = (cfg.refractory_samples() + 2) as i64;
            for w in stream.events.windows(2) {
                let gap = ((w[1].t_s - w[0].t_s) / cfg.dt_s).round() as i64;
                prop_assert!(gap >= min_gap, "gap {gap} < {min_gap}");
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn prop_determinism_and_bounds() -> Result<(), String> {
    let strategy = (
        any::<bool>(),
        0.0f64..0.3,
        1usize..3,
        any::<u64>(),
        0.05f64..0.4,
        polarity(),
    );
    runner()
        .run(&strategy, |(rptp, sigma, n_pixels, seed, lo, pol)| {
            let m = small_measurement(rptp, sigma, n_pixels, seed, lo, 3, pol);
            let a = measure_scurve(&m).expect("measures");
            let b = measure_scurve(&m).expect("measures");
            prop_assert_eq!(a.to_csv_string(), b.to_csv_string());
            for p in a.points() {
                prop_assert!(p.n_responses <= p.n_trials);
                prop_assert!((0.0..=1.0).contains(&p.probability));
                prop_assert_eq!(p.probability, p.n_responses as f64 / p.n_trials as f64);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn prop_scale_invariance() -> Result<(), String> {
    let strategy = (-6.0f64..6.0, 0.0f64..0.3, 0.05f64..0.6, any::<u64>());
    runner()
        .run(&strategy, |(log10_k, sigma, contrast, seed)| {
            let spec = SquareWaveSpec {
                linear_contrast: contrast,
                duration_s: 0.6,
                ..SquareWaveSpec::default()
            };
            let cfg = PixelConfig {
                noise_sigma: sigma,
                seed,
                ..PixelConfig::default()
            };
            let photometry = PhotometryConfig::default();
            let current = make_square_wave(&spec, cfg.dt_s)
                .and_then(|s| s.to_photocurrent(&photometry))
                .expect("valid");
            let scaled = current.scaled(10f64.powf(log10_k)).expect("valid");
            let a = simulate_pixel(&current, &cfg).expect("valid");
            let b = simulate_pixel(&scaled, &cfg).expect("valid");
            let key = |s: &evs_scurve::pixel::EventStream| {
                s.events
                    .iter()
                    .map(|e| (e.t_s.to_bits(), e.polarity))
                    .collect::<Vec<_>>()
            };
            prop_assert_eq!(key(&a), key(&b));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn prop_nct_ordering() -> Result<(), String> {
    let strategy = (3usize..40, 20u64..500).prop_flat_map(|(n, trials)| {
        (
            proptest::collection::vec(0.001f64..1.0, n),
            proptest::collection::vec(0..=trials, n),
            Just(trials),
        )
    });
    runner()
        .run(&strategy, |(mut contrasts, mut responses, trials)| {
            contrasts.sort_by(f64::total_cmp);
            contrasts.dedup();
            responses.truncate(contrasts.len());
            responses.sort_unstable();
            let points: Vec<ScurvePoint> = contrasts
                .iter()
                .zip(&responses)
                .map(|(&c, &k)| ScurvePoint::new(c, trials, k).expect("valid point"))
                .collect();
            let curve = SCurve::new(points, Polarity::On, CurveMeta::default()).expect("valid");
            let e = estimate(&curve, Epsilon::Auto).expect("estimates");
            if let (Some(nct), Some(t100)) = (e.nct_50, e.theta_100) {
                prop_assert!(nct <= t100 + 1e-12, "nct {nct} > theta_100 {t100}");
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn prop_round_trip() -> Result<(), String> {
    let strategy = (
        any::<bool>(),
        0.0f64..0.3,
        1usize..4,
        any::<u64>(),
        0.05f64..0.4,
        polarity(),
    );
    runner()
        .run(&strategy, |(rptp, sigma, n_pixels, seed, lo, pol)| {
            let m = small_measurement(rptp, sigma, n_pixels, seed, lo, 3, pol);
            let runs = simulate_sweep(&m).expect("simulates");
            let direct = score_runs(&runs, pol, CurveMeta::default()).expect("scores");
            let (events, schedule) = export_runs(&runs);
            let ingested = ingest(
                &events,
                &schedule,
                Some(n_pixels),
                &IngestOptions::new(m.rule, pol),
            )
            .expect("ingests");
            prop_assert_eq!(ingested.curves.len(), 1);
            prop_assert_eq!(ingested.curves[0].points(), direct.points());
            Ok(())
        })
        .map_err(|e| e.to_string())
}

type Suite = fn() -> Result<(), String>;

fn c9_properties() -> Outcome {
    let suites: [(&str, Suite); 5] = [
        ("refractory-spacing", prop_refractory_spacing),
        ("determinism+bounds", prop_determinism_and_bounds),
        ("scale-invariance", prop_scale_invariance),
        ("nct<=theta_100", prop_nct_ordering),
        ("ingest-round-trip", prop_round_trip),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, suite) in suites {
        match suite() {
            Ok(()) => parts.push(format!("{name} ok")),
            Err(e) => {
                pass = false;
                parts.push(format!("{name} FAILED: {e}"));
            }
        }
    }
    outcome(
        pass,
        format!("{} ({PROPERTY_CASES} cases each)", parts.join(", ")),
    )
}

fn main() {
    let mut cal = Calibrations::new();
    let mut failures = 0;
    let mut report = |id: u32, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = run();
        if !o.pass {
            failures += 1;
        }
        println!(
            "criterion {id} [{}] {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };
    report(1, "ideal step", &mut c1_ideal_step);
    report(2, "noise calibration", &mut || {
        c2_noise_calibration(&mut cal)
    });
    let cal = cal;
    if cal.len() == BANDWIDTHS.len() * TARGETS.len() {
        report(3, "NCT left shift", &mut || c3_nct_left_shift(&cal));
        report(4, "low-bandwidth 100% intercept", &mut || {
            c4_low_bandwidth_plateau(&cal)
        });
        report(5, "mismatch right shift", &mut || c5_mismatch(&cal));
        report(6, "robustness", &mut || c6_robustness(&cal));
    } else {
        for (id, name) in [
            (3, "NCT left shift"),
            (4, "low-bandwidth 100% intercept"),
            (5, "mismatch right shift"),
            (6, "robustness"),
        ] {
            report(id, name, &mut || {
                outcome(false, "noise calibration unavailable")
            });
        }
    }
    report(7, "filter correctness", &mut c7_filter);
    if cal.contains_key(&key(50.0, 0.02)) {
        report(8, "dark-current round trip", &mut || c8_dark_current(&cal));
    } else {
        report(8, "dark-current round trip", &mut || {
            outcome(false, "noise calibration unavailable")
        });
    }
    report(9, "property suites", &mut c9_properties);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
