//! Recorded event data: CSV formats, export of simulated runs and ingestion
//! into S-curves.
//!
//! Events are `t_us,pixel_id,polarity` with polarity `1`/`on` or `0`/`off`.
//! The schedule lists one trial window per row:
//! `pulse_index,t_start_us,t_end_us,linear_contrast,baseline_lux`. All
//! timestamps are integer microseconds, so simulated runs on a grid of whole
//! microseconds round-trip exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::pixel::{to_micros, Polarity};
use crate::scurve::{
    csv_error, ContrastRun, CountingMode, CountingRule, CurveMeta, SCurve, ScurvePoint,
};

pub const DEFAULT_MIN_PULSES: usize = 20;
/// Events further than this outside the scheduled span draw a warning.
pub const DEFAULT_SLACK_US: i64 = 1_000_000;

const EVENTS_HEADER: [&str; 3] = ["t_us", "pixel_id", "polarity"];
const SCHEDULE_HEADER: [&str; 5] = [
    "pulse_index",
    "t_start_us",
    "t_end_us",
    "linear_contrast",
    "baseline_lux",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordedEvent {
    pub t_us: i64,
    pub pixel_id: u32,
    pub polarity: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRow {
    pub pulse_index: u64,
    pub t_start_us: i64,
    pub t_end_us: i64,
    pub linear_contrast: f64,
    pub baseline_lux: f64,
}

/// A recording on disk plus metadata that the files do not carry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordedDataset {
    pub events_path: PathBuf,
    pub schedule_path: PathBuf,
    /// Pixels in the region of interest. Needed to count silent pixels;
    /// defaults to the highest pixel id seen plus one.
    pub roi_pixels: Option<usize>,
    /// Vendor refractory bias setting, kept verbatim.
    pub refractory_setting: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub rule: CountingRule,
    pub polarity: Polarity,
    /// Minimum windows per contrast level.
    pub min_pulses: usize,
    pub slack_us: i64,
}

impl IngestOptions {
    pub fn new(rule: CountingRule, polarity: Polarity) -> Self {
        Self {
            rule,
            polarity,
            min_pulses: DEFAULT_MIN_PULSES,
            slack_us: DEFAULT_SLACK_US,
        }
    }
}

/// One curve per baseline illuminance, ascending, plus non-fatal findings.
#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub curves: Vec<SCurve>,
    pub n_pixels: usize,
    pub warnings: Vec<String>,
}

fn header_check(
    reader: &mut csv::Reader<impl std::io::Read>,
    expected: &[&str],
    source: &str,
) -> Result<()> {
    let header = reader.headers().map_err(|e| csv_error(source, &e))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            path: source.into(),
            line: 1,
            message: format!("expected header {}", expected.join(",")),
        });
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    i: usize,
    names: &[&str],
    source: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let line = record.position().map_or(0, |p| p.line());
    record
        .get(i)
        .unwrap_or("")
        .parse()
        .map_err(|e: T::Err| Error::Parse {
            path: source.into(),
            line,
            message: format!("column {}: {e}", names[i]),
        })
}

fn parse_polarity(s: &str) -> Option<Polarity> {
    match s {
        "1" | "on" | "ON" => Some(Polarity::On),
        "0" | "off" | "OFF" => Some(Polarity::Off),
        _ => None,
    }
}

pub fn read_events<R: BufRead>(input: R, source: &str) -> Result<Vec<RecordedEvent>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    header_check(&mut reader, &EVENTS_HEADER, source)?;
    let mut events = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(source, &e))?;
        let polarity = parse_polarity(record.get(2).unwrap_or("")).ok_or_else(|| Error::Parse {
            path: source.into(),
            line: record.position().map_or(0, |p| p.line()),
            message: format!("column polarity: expected 0/1/on/off, got `{}`", &record[2]),
        })?;
        events.push(RecordedEvent {
            t_us: parse_field(&record, 0, &EVENTS_HEADER, source)?,
            pixel_id: parse_field(&record, 1, &EVENTS_HEADER, source)?,
            polarity,
        });
    }
    Ok(events)
}

pub fn read_schedule<R: BufRead>(input: R, source: &str) -> Result<Vec<ScheduleRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    header_check(&mut reader, &SCHEDULE_HEADER, source)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(source, &e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row = ScheduleRow {
            pulse_index: parse_field(&record, 0, &SCHEDULE_HEADER, source)?,
            t_start_us: parse_field(&record, 1, &SCHEDULE_HEADER, source)?,
            t_end_us: parse_field(&record, 2, &SCHEDULE_HEADER, source)?,
            linear_contrast: parse_field(&record, 3, &SCHEDULE_HEADER, source)?,
            baseline_lux: parse_field(&record, 4, &SCHEDULE_HEADER, source)?,
        };
        let bad = |message: &str| Error::Parse {
            path: source.into(),
            line,
            message: message.into(),
        };
        if row.t_end_us <= row.t_start_us {
            return Err(bad("t_end_us must be after t_start_us"));
        }
        if !(row.linear_contrast.is_finite() && row.linear_contrast >= 0.0) {
            return Err(bad("linear_contrast must be finite and >= 0"));
        }
        if !(row.baseline_lux.is_finite() && row.baseline_lux > 0.0) {
            return Err(bad("baseline_lux must be finite and > 0"));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_schedule_csv<W: Write>(rows: &[ScheduleRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", SCHEDULE_HEADER.join(","))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.pulse_index, r.t_start_us, r.t_end_us, r.linear_contrast, r.baseline_lux
        )?;
    }
    Ok(())
}

pub fn write_recorded_events_csv<W: Write>(
    events: &[RecordedEvent],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "{}", EVENTS_HEADER.join(","))?;
    for e in events {
        writeln!(out, "{},{},{}", e.t_us, e.pixel_id, e.polarity.bit())?;
    }
    Ok(())
}

/// Lay simulated contrast runs end to end on one microsecond clock.
///
/// Run `k` is shifted by the summed durations of runs `0..k`. Returns the
/// events sorted by `(t_us, pixel_id)` and one schedule row per scored window.
pub fn export_runs(runs: &[ContrastRun]) -> (Vec<RecordedEvent>, Vec<ScheduleRow>) {
    let mut events = Vec::new();
    let mut schedule = Vec::new();
    let mut offset = 0i64;
    for run in runs {
        for stream in &run.result.streams {
            events.extend(stream.events.iter().map(|e| RecordedEvent {
                t_us: offset + to_micros(e.t_s),
                pixel_id: stream.pixel_id,
                polarity: e.polarity,
            }));
        }
        schedule.extend(run.windows.iter().enumerate().map(|(i, w)| ScheduleRow {
            pulse_index: i as u64,
            t_start_us: offset + to_micros(w.start_s),
            t_end_us: offset + to_micros(w.end_s),
            linear_contrast: run.linear_contrast,
            baseline_lux: run.baseline_lux,
        }));
        offset += to_micros(run.duration_s);
    }
    events.sort_unstable_by_key(|e| (e.t_us, e.pixel_id));
    (events, schedule)
}

/// Read a dataset from disk and ingest it.
pub fn ingest_recorded(dataset: &RecordedDataset, opts: &IngestOptions) -> Result<Ingested> {
    let open = |path: &PathBuf| -> Result<BufReader<File>> {
        File::open(path)
            .map(BufReader::new)
            .map_err(|e| Error::io(path, e))
    };
    let events = read_events(
        open(&dataset.events_path)?,
        &dataset.events_path.display().to_string(),
    )?;
    let schedule = read_schedule(
        open(&dataset.schedule_path)?,
        &dataset.schedule_path.display().to_string(),
    )?;
    ingest(&events, &schedule, dataset.roi_pixels, opts)
}

/// Score recorded events against a schedule.
///
/// Windows are grouped by `(baseline_lux, linear_contrast)`. With
/// [`CountingMode::SquareWavePerEdge`] each row's `[t_start, t_end)` is the
/// window; with [`CountingMode::RptpWindow`] the window is `window_s` from
/// `t_start`. Each pixel scores each window once.
pub fn ingest(
    events: &[RecordedEvent],
    schedule: &[ScheduleRow],
    roi_pixels: Option<usize>,
    opts: &IngestOptions,
) -> Result<Ingested> {
    opts.rule.validate()?;
    if schedule.is_empty() {
        return Err(Error::invalid("schedule", "contains no windows"));
    }
    let mut warnings = Vec::new();
    let seen = events.iter().map(|e| e.pixel_id as usize + 1).max();
    let n_pixels = match (roi_pixels, seen) {
        (Some(n), Some(s)) if s > n => {
            return Err(Error::invalid(
                "roi_pixels",
                format!("{n} pixels but events reference pixel id {}", s - 1),
            ))
        }
        (Some(0), _) => return Err(Error::invalid("roi_pixels", "must be >= 1")),
        (Some(n), _) => n,
        (None, Some(s)) => s,
        (None, None) => {
            warnings.push("no events and no ROI size given; assuming 1 pixel".to_string());
            1
        }
    };

    let window_us = match opts.rule.mode {
        CountingMode::SquareWavePerEdge => None,
        CountingMode::RptpWindow => Some(to_micros(opts.rule.window_s).max(1)),
    };
    let windows: Vec<(i64, i64)> = schedule
        .iter()
        .map(|r| {
            (
                r.t_start_us,
                window_us.map_or(r.t_end_us, |w| r.t_start_us + w),
            )
        })
        .collect();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by_key(|&i| windows[i]);
    if let Some(pair) = order.windows(2).find(|p| windows[p[1]].0 < windows[p[0]].1) {
        return Err(Error::invalid(
            "schedule",
            format!(
                "windows starting at {} us and {} us overlap",
                windows[pair[0]].0, windows[pair[1]].0
            ),
        ));
    }

    let span = (
        windows[order[0]].0,
        windows.iter().map(|w| w.1).max().unwrap_or(0),
    );
    let outside = events
        .iter()
        .filter(|e| e.t_us < span.0 - opts.slack_us || e.t_us > span.1 + opts.slack_us)
        .count();
    if outside > 0 {
        warnings.push(format!(
            "{outside} events lie more than {} us outside the scheduled span",
            opts.slack_us
        ));
    }

    // per pixel: sorted timestamps of the tested polarity and of all events
    let mut tested: Vec<Vec<i64>> = vec![Vec::new(); n_pixels];
    let mut any: Vec<Vec<i64>> = vec![Vec::new(); n_pixels];
    for e in events {
        let p = e.pixel_id as usize;
        any[p].push(e.t_us);
        if e.polarity == opts.polarity {
            tested[p].push(e.t_us);
        }
    }
    for v in tested.iter_mut().chain(any.iter_mut()) {
        v.sort_unstable();
    }
    let hit = |times: &[i64], (start, end): (i64, i64)| {
        let i = times.partition_point(|&t| t < start);
        i < times.len() && times[i] < end
    };

    // keyed by f64 bits, which order non-negative values numerically
    let mut groups: BTreeMap<u64, BTreeMap<u64, Vec<usize>>> = BTreeMap::new();
    for (i, r) in schedule.iter().enumerate() {
        groups
            .entry(r.baseline_lux.to_bits())
            .or_default()
            .entry(r.linear_contrast.to_bits())
            .or_default()
            .push(i);
    }

    let mut curves = Vec::with_capacity(groups.len());
    for (lux_bits, by_contrast) in groups {
        let baseline_lux = f64::from_bits(lux_bits);
        let mut points = Vec::with_capacity(by_contrast.len());
        let mut empty_at_top = 0usize;
        for (c_bits, rows) in &by_contrast {
            let c = f64::from_bits(*c_bits);
            if rows.len() < opts.min_pulses {
                return Err(Error::invalid(
                    "schedule",
                    format!(
                        "contrast {c} at {baseline_lux} lx has {} windows, need >= {}",
                        rows.len(),
                        opts.min_pulses
                    ),
                ));
            }
            let mut responses = 0u64;
            empty_at_top = 0;
            for p in 0..n_pixels {
                for &r in rows {
                    if hit(&tested[p], windows[r]) {
                        responses += 1;
                    }
                    if !hit(&any[p], windows[r]) {
                        empty_at_top += 1;
                    }
                }
            }
            points.push(ScurvePoint::new(
                c,
                (rows.len() * n_pixels) as u64,
                responses,
            )?);
        }
        let top_trials = points.last().map_or(0, |p| p.n_trials) as usize;
        if empty_at_top * 2 > top_trials {
            warnings.push(format!(
                "{empty_at_top} of {top_trials} windows at the highest contrast ({} lx) contain no events",
                baseline_lux
            ));
        }
        let meta = CurveMeta {
            stimulus: "recorded".to_string(),
            baseline_lux,
            digest: String::new(),
            refractory_overlaps: Vec::new(),
        };
        curves.push(SCurve::new(points, opts.polarity, meta)?);
    }
    Ok(Ingested {
        curves,
        n_pixels,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64, start: i64, c: f64) -> ScheduleRow {
        ScheduleRow {
            pulse_index: i,
            t_start_us: start,
            t_end_us: start + 40_000,
            linear_contrast: c,
            baseline_lux: 100.0,
        }
    }

    fn schedule(contrasts: &[f64], pulses: u64) -> Vec<ScheduleRow> {
        let mut rows = Vec::new();
        let mut t = 0;
        for &c in contrasts {
            for i in 0..pulses {
                rows.push(row(i, t, c));
                t += 100_000;
            }
        }
        rows
    }

    fn opts() -> IngestOptions {
        IngestOptions::new(CountingRule::square_wave(), Polarity::On)
    }

    #[test]
    fn counts_binary_per_window() {
        let sched = schedule(&[0.1], 20);
        // pixel 0 fires twice in window 0 and once in window 1; pixel 1 fires OFF only
        let ev = |t, p, pol| RecordedEvent {
            t_us: t,
            pixel_id: p,
            polarity: pol,
        };
        let events = vec![
            ev(10, 0, Polarity::On),
            ev(20, 0, Polarity::On),
            ev(100_000, 0, Polarity::On),
            ev(140_000, 0, Polarity::On),
            ev(10, 1, Polarity::Off),
        ];
        let out = ingest(&events, &sched, Some(2), &opts()).unwrap();
        let p = out.curves[0].points()[0];
        assert_eq!((p.n_trials, p.n_responses), (40, 2));
    }

    #[test]
    fn empty_events_give_zero_with_warning() {
        let out = ingest(&[], &schedule(&[0.1, 0.2], 20), Some(4), &opts()).unwrap();
        assert!(out.curves[0].points().iter().all(|p| p.probability == 0.0));
        assert!(out.warnings.iter().any(|w| w.contains("no events")));
    }

    #[test]
    fn hundred_pulses_ten_contrasts() {
        let contrasts: Vec<f64> = (1..=10).map(|i| i as f64 * 0.05).collect();
        let out = ingest(&[], &schedule(&contrasts, 100), Some(7), &opts()).unwrap();
        let c = &out.curves[0];
        assert_eq!(c.points().len(), 10);
        assert!(c.points().iter().all(|p| p.n_trials == 700));
    }

    #[test]
    fn too_few_pulses_and_overlap_rejected() {
        assert!(ingest(&[], &schedule(&[0.1], 19), Some(1), &opts()).is_err());
        let mut s = schedule(&[0.1], 20);
        s[1].t_start_us = s[0].t_start_us + 10;
        assert!(ingest(&[], &s, Some(1), &opts()).is_err());
    }

    #[test]
    fn parse_errors_carry_lines() {
        let text = "t_us,pixel_id,polarity\n1,0,1\n2,0,x\n";
        match read_events(text.as_bytes(), "ev.csv") {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        let text = "pulse_index,t_start_us,t_end_us,linear_contrast,baseline_lux\n0,5,4,0.1,1\n";
        match read_schedule(text.as_bytes(), "s.csv") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(read_events("t,pixel_id,polarity\n".as_bytes(), "ev.csv").is_err());
    }

    #[test]
    fn groups_by_baseline() {
        let mut s = schedule(&[0.1, 0.2], 20);
        for r in s.iter_mut().skip(20) {
            r.baseline_lux = 3.0;
        }
        let more: Vec<ScheduleRow> = schedule(&[0.2], 20)
            .into_iter()
            .map(|mut r| {
                r.t_start_us += 10_000_000;
                r.t_end_us += 10_000_000;
                r.baseline_lux = 3.0;
                r
            })
            .collect();
        s.extend(more);
        let out = ingest(&[], &s, Some(1), &opts()).unwrap();
        assert_eq!(out.curves.len(), 2);
        assert_eq!(out.curves[0].meta.baseline_lux, 3.0);
        assert_eq!(out.curves[0].points()[0].n_trials, 40);
    }

    #[test]
    fn csv_round_trip() {
        let s = schedule(&[0.1], 3);
        let mut buf = Vec::new();
        write_schedule_csv(&s, &mut buf).unwrap();
        assert_eq!(read_schedule(&buf[..], "s").unwrap(), s);
        let ev = vec![RecordedEvent {
            t_us: 5,
            pixel_id: 2,
            polarity: Polarity::Off,
        }];
        let mut buf = Vec::new();
        write_recorded_events_csv(&ev, &mut buf).unwrap();
        assert_eq!(read_events(&buf[..], "e").unwrap(), ev);
    }
}
