use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_evs-scurve");

const SMALL: &str = r#"
kind = "custom"
seed = 5

[pixel]
noise_sigma = 0.1
f3db_hz = 500.0

[array]
n_pixels = 2

[stimulus]
duration_s = 4.3

[sweep]
kind = "linear"
lo = 0.2
hi = 0.5
n = 4

[output]
export_events = true
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_run(dir: &Path, out: &str, extra: &[&str]) -> Output {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    let mut args = vec!["scurve", "--config", "small.toml", "--out", out];
    args.extend_from_slice(extra);
    run(dir, &args)
}

#[test]
fn help_and_version_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run(dir.path(), &["--version"])), 0);
    assert_eq!(code(&run(dir.path(), &["scurve", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["bogus"])), 1);
    assert_eq!(code(&run(dir.path(), &["scurve", "--jobs", "x"])), 1);
    assert_eq!(code(&run(dir.path(), &["scurve"])), 1);
}

#[test]
fn unknown_kind_names_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "kind = \"bogus\"\n").unwrap();
    let o = run(dir.path(), &["scurve", "--config", "bad.toml"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("`kind`"), "{}", stderr(&o));
}

#[test]
fn unknown_key_names_path() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "kind = \"custom\"\n[sweep]\nkind = \"linear\"\nsteps = 3\n",
    )
    .unwrap();
    let o = run(dir.path(), &["scurve", "--config", "bad.toml"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("sweep") && err.contains("steps"), "{err}");
}

#[test]
fn invalid_values_exit_one_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.toml"),
        "kind = \"custom\"\n[pixel]\nf3db_hz = 50000.0\n",
    )
    .unwrap();
    let o = run(
        dir.path(),
        &["scurve", "--config", "bad.toml", "--out", "out"],
    );
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_input_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["estimate", "missing.csv"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn malformed_input_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.csv"),
        "linear_contrast,log_contrast,n_trials,n_responses,probability\n0.1,0.0953101798043249,10,x,0.5\n",
    )
    .unwrap();
    let o = run(dir.path(), &["estimate", "c.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("c.csv:2:"), "{}", stderr(&o));
}

#[test]
fn scurve_artifacts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_run(dir.path(), "a", &[]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = small_run(dir.path(), "b", &["--jobs", "1"]);
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    let names = [
        "square-wave-on.scurve.csv",
        "square-wave-on.estimate.csv",
        "summary.csv",
        "scurves.svg",
        "events.csv",
        "schedule.csv",
    ];
    for name in names {
        let x = fs::read(dir.path().join("a").join(name)).unwrap();
        let y = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    let c = small_run(dir.path(), "c", &["--seed", "6"]);
    assert_eq!(code(&c), 0);
    assert_ne!(
        fs::read(dir.path().join("a/events.csv")).unwrap(),
        fs::read(dir.path().join("c/events.csv")).unwrap()
    );
}

#[test]
fn ingest_reproduces_simulated_curve() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_run(dir.path(), "sim", &[])), 0);
    let o = run(
        dir.path(),
        &[
            "ingest",
            "--events",
            "sim/events.csv",
            "--schedule",
            "sim/schedule.csv",
            "--mode",
            "square-wave",
            "--roi",
            "2",
            "--out",
            "rec",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let direct = fs::read_to_string(dir.path().join("sim/square-wave-on.scurve.csv")).unwrap();
    let ingested = fs::read_to_string(dir.path().join("rec/100lx-on.scurve.csv")).unwrap();
    assert_eq!(direct, ingested);
}

#[test]
fn estimate_and_plot_from_files() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_run(dir.path(), "sim", &[])), 0);
    let o = run(
        dir.path(),
        &["estimate", "sim/square-wave-on.scurve.csv", "--out", "est"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let est = fs::read_to_string(dir.path().join("est/estimates.csv")).unwrap();
    assert!(est.starts_with("polarity,nct_50,gauss_mu,gauss_sigma,theta_100,epsilon,flags\non,"));
    let again = run(dir.path(), &["estimate", "sim/square-wave-on.scurve.csv"]);
    assert!(stdout(&again).ends_with(&est));

    let o = run(
        dir.path(),
        &[
            "plot",
            "sim/square-wave-on.scurve.csv@100",
            "--estimates",
            "est/estimates.csv",
            "--out",
            "fig",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let svg = fs::read_to_string(dir.path().join("fig/scurves.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(svg.contains("100 lx (on)"));
    assert!(svg.contains("stroke-dasharray"));
}

#[test]
fn bad_epsilon_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_run(dir.path(), "sim", &[])), 0);
    let o = run(
        dir.path(),
        &[
            "estimate",
            "sim/square-wave-on.scurve.csv",
            "--epsilon",
            "often",
        ],
    );
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("epsilon"));
}

#[test]
fn dark_current_helpers() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "dark-current",
            "--llco-lux",
            "0.05",
            "--f3db",
            "50",
            "--window-s",
            "0.04",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("LLCO dark current"), "{text}");
    assert!(text.contains("attenuation at 50 Hz"), "{text}");
    let o = run(dir.path(), &["dark-current", "--curve", "0.1=x.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--reference"));
}

#[test]
fn dark_current_from_curve_files() {
    let dir = tempfile::tempdir().unwrap();
    // ideal steps at C = 0.8 (dim) and 0.35 (reference)
    for (name, step) in [("dim.csv", 0.8f64), ("ref.csv", 0.35)] {
        let mut csv =
            String::from("linear_contrast,log_contrast,n_trials,n_responses,probability\n");
        for i in 0..40 {
            let l = 0.2 + 0.02 * i as f64;
            let k = if l >= step - 1e-9 { 200 } else { 0 };
            let c = l.exp_m1();
            csv.push_str(&format!("{c},{},200,{k},{}\n", c.ln_1p(), k as f64 / 200.0));
        }
        fs::write(dir.path().join(name), csv).unwrap();
    }
    let o = run(
        dir.path(),
        &[
            "dark-current",
            "--curve",
            "0.076=dim.csv",
            "--curve",
            "0.1=dim.csv",
            "--reference",
            "300=ref.csv",
            "--out",
            "dc",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("dc/dark_current.csv")).unwrap();
    assert!(
        csv.starts_with("baseline_lux,C,i_pho1_fA,i_dark_fA\n0.076,"),
        "{csv}"
    );
    assert!(csv.contains("\nmean,,,"));
}

#[test]
fn calibrate_noise_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "calibrate-noise",
            "--f3db",
            "2000",
            "--target-ba",
            "5",
            "--runs",
            "4",
            "--duration",
            "2",
            "--tolerance",
            "0.3",
            "--out",
            "cal",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("cal/calibration.csv")).unwrap();
    assert!(
        csv.starts_with("f3db_hz,target_ba_hz,sigma,achieved_ba_hz\n2000,5,"),
        "{csv}"
    );
    let o = run(dir.path(), &["calibrate-noise"]);
    assert_eq!(code(&o), 1);
}
