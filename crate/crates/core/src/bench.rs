//! Config-driven experiment runner: sweeps, summaries and policy reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sim::{PolicyKind, SimConfig, SimError, Simulation, Trace};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("simulation failed at {point}: {source}")]
    Sim { point: String, source: SimError },
    #[error("need summary rows for at least two policies, found {0:?}")]
    MissingSeries(Vec<String>),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One swept parameter: a JSON pointer (`/workload/shuffles_per_minute`)
/// or dotted path (`workload.shuffles_per_minute`) into the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub parameter: String,
    pub values: Vec<Value>,
}

impl Sweep {
    pub fn pointer(&self) -> String {
        if self.parameter.starts_with('/') {
            self.parameter.clone()
        } else {
            format!("/{}", self.parameter.replace('.', "/"))
        }
    }
}

fn d_warmup() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Run config shared by every point, as a JSON document.
    pub base: Value,
    pub policies: Vec<PolicyKind>,
    pub seeds: Vec<u64>,
    /// Overrides `base.duration` when set.
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    /// Windows ending before this time are left out of the summary means.
    #[serde(default = "d_warmup")]
    pub warmup: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// One (sweep value, policy, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub sweep_value: String,
    pub policy: PolicyKind,
    pub seed: u64,
    pub config: SimConfig,
}

impl Point {
    pub fn trace_file_name(&self) -> String {
        format!("trace_{}_{}_{}.csv", self.policy.name(), self.sweep_value, self.seed)
    }
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_pointer(doc: &mut Value, pointer: &str, v: Value) -> Result<(), BenchError> {
    if let Some(slot) = doc.pointer_mut(pointer) {
        *slot = v;
        return Ok(());
    }
    let (parent, key) = pointer
        .rsplit_once('/')
        .ok_or_else(|| BenchError::Config(format!("bad sweep parameter `{pointer}`")))?;
    let mut cur = doc;
    for part in parent.split('/').filter(|p| !p.is_empty()) {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| BenchError::Config(format!("sweep parameter `{pointer}`: `{part}` is not an object")))?;
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| BenchError::Config(format!("sweep parameter `{pointer}` has no object parent")))?;
    obj.insert(key.to_string(), v);
    Ok(())
}

fn parse_run(doc: Value, what: &str) -> Result<SimConfig, BenchError> {
    let text = doc.to_string();
    serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{what}: {e}")))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, BenchError> {
        serde_json::from_str(text)
            .map_err(|e| BenchError::Config(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.policies.is_empty() {
            return Err(BenchError::Config("policies: must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(BenchError::Config("seeds: must not be empty".into()));
        }
        if let Some(d) = self.duration {
            if !(d > 0.0) {
                return Err(BenchError::Config("duration: must be > 0".into()));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(BenchError::Config("sweep.values: must not be empty".into()));
            }
        }
        self.points().map(|_| ())
    }

    /// Every run in deterministic order: sweep value, then policy, then seed.
    pub fn points(&self) -> Result<Vec<Point>, BenchError> {
        let sweep: Vec<(String, Option<Value>)> = match &self.sweep {
            Some(s) => s.values.iter().map(|v| (value_label(v), Some(v.clone()))).collect(),
            None => vec![("base".to_string(), None)],
        };
        let mut out = Vec::new();
        for (label, value) in &sweep {
            for &policy in &self.policies {
                for &seed in &self.seeds {
                    let mut doc = self.base.clone();
                    if let (Some(s), Some(v)) = (&self.sweep, value) {
                        set_pointer(&mut doc, &s.pointer(), v.clone())?;
                    }
                    let what = format!("point {}={label} policy={policy} seed={seed}", self.sweep_name());
                    let mut config = parse_run(doc, &what)?;
                    config.policy = policy;
                    config.workload.seed = seed;
                    if let Some(d) = self.duration {
                        config.duration = d;
                    }
                    config.validate().map_err(|e| BenchError::Config(format!("{what}: {e}")))?;
                    out.push(Point {
                        sweep_value: label.clone(),
                        policy,
                        seed,
                        config,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn sweep_name(&self) -> String {
        self.sweep.as_ref().map_or_else(|| "none".into(), |s| s.parameter.clone())
    }
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep_parameter: String,
    pub sweep_value: String,
    pub policy: String,
    pub seed: u64,
    pub mean_throughput_tps: f64,
    pub mean_latency_s: f64,
    pub p99_latency_s: f64,
    pub migrated_bytes: u64,
    pub sync_messages: u64,
    pub remote_transfer_bytes: u64,
    pub tuples_completed: u64,
    pub repartitions: u64,
}

impl SummaryRow {
    pub fn from_trace(exp: &ExperimentConfig, point: &Point, trace: &Trace) -> Self {
        let kept: Vec<_> = trace.windows.iter().filter(|w| w.window_end_s > exp.warmup).collect();
        let completed: f64 = kept.iter().map(|w| w.throughput_tps).sum();
        let latency = if completed > 0.0 {
            kept.iter().map(|w| w.throughput_tps * w.mean_latency_s).sum::<f64>() / completed
        } else {
            0.0
        };
        let t = &trace.totals;
        Self {
            sweep_parameter: exp.sweep_name(),
            sweep_value: point.sweep_value.clone(),
            policy: point.policy.name().to_string(),
            seed: point.seed,
            mean_throughput_tps: trace.mean_throughput(exp.warmup),
            mean_latency_s: latency,
            p99_latency_s: t.p99_latency,
            migrated_bytes: t.migrated_bytes,
            sync_messages: t.sync_messages,
            remote_transfer_bytes: t.remote_transfer_bytes,
            tuples_completed: t.tuples_completed,
            repartitions: t.repartitions,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub point: Point,
    pub trace: Trace,
    pub summary: SummaryRow,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, BenchError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| BenchError::Config(format!("jobs: {e}")))
}

fn run_point(exp: &ExperimentConfig, point: Point, out: Option<&Path>) -> Result<PointResult, BenchError> {
    let name = point.trace_file_name();
    let trace = Simulation::new(point.config.clone())
        .and_then(Simulation::run)
        .map_err(|source| BenchError::Sim {
            point: name.clone(),
            source,
        })?;
    if let Some(dir) = out {
        let path = dir.join(&name);
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        trace.write_csv(file)?;
    }
    let summary = SummaryRow::from_trace(exp, &point, &trace);
    Ok(PointResult { point, trace, summary })
}

/// Runs every point on `jobs` worker threads. Results come back in point
/// order regardless of completion order.
pub fn run_points(exp: &ExperimentConfig, jobs: usize) -> Result<Vec<PointResult>, BenchError> {
    exp.validate()?;
    let points = exp.points()?;
    pool(jobs)?.install(|| points.into_par_iter().map(|p| run_point(exp, p, None)).collect())
}

/// Runs the experiment and writes per-point traces, `summary.csv` and,
/// when `report` is set, `report.md` into `out`.
pub fn run_experiment(exp: &ExperimentConfig, out: &Path, jobs: usize, report: bool) -> Result<Vec<SummaryRow>, BenchError> {
    exp.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let points = exp.points()?;
    // Traces are written as points finish so an interrupted run keeps them.
    let rows: Vec<SummaryRow> = pool(jobs)?.install(|| {
        points
            .into_par_iter()
            .map(|p| run_point(exp, p, Some(out)).map(|r| r.summary))
            .collect::<Result<_, BenchError>>()
    })?;
    write_summary(&out.join("summary.csv"), &rows)?;
    if report {
        let text = compare_rows(&rows)?.to_markdown();
        let path = out.join("report.md");
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(rows)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<(), BenchError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, BenchError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize().map(|row| row.map_err(BenchError::from)).collect()
}

/// Throughput and latency of `policy` relative to `baseline` at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ratio {
    pub sweep_value: String,
    pub policy: String,
    pub baseline: String,
    pub throughput_ratio: f64,
    pub latency_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub sweep_parameter: String,
    pub ratios: Vec<Ratio>,
    pub trends: Vec<TrendCheck>,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else if b == 0.0 {
        f64::INFINITY
    } else {
        a / b
    }
}

fn sort_key(v: &str) -> (f64, String) {
    (v.parse::<f64>().unwrap_or(f64::INFINITY), v.to_string())
}

type Series = BTreeMap<(String, String), Vec<(u64, f64, f64)>>;

fn series(rows: &[SummaryRow]) -> Series {
    let mut s: Series = BTreeMap::new();
    for r in rows {
        s.entry((r.policy.clone(), r.sweep_value.clone()))
            .or_default()
            .push((r.seed, r.mean_throughput_tps, r.mean_latency_s));
    }
    s
}

fn seed_value(s: &Series, policy: &str, value: &str, seed: u64) -> Option<f64> {
    s.get(&(policy.to_string(), value.to_string()))?
        .iter()
        .find(|(sd, _, _)| *sd == seed)
        .map(|(_, t, _)| *t)
}

/// Per-seed majority vote of `pred` over every seed of the series.
fn majority(seeds: &[u64], mut pred: impl FnMut(u64) -> Option<bool>) -> (bool, usize, usize) {
    let votes: Vec<bool> = seeds.iter().filter_map(|&s| pred(s)).collect();
    let yes = votes.iter().filter(|v| **v).count();
    (!votes.is_empty() && 2 * yes > votes.len(), yes, votes.len())
}

/// Builds the comparison report from summary rows.
pub fn compare_rows(rows: &[SummaryRow]) -> Result<Report, BenchError> {
    let mut policies: Vec<String> = rows.iter().map(|r| r.policy.clone()).collect();
    policies.sort_by_key(|p| p.parse::<PolicyKind>().map_or(u8::MAX, |k| k as u8));
    policies.dedup();
    if policies.len() < 2 {
        return Err(BenchError::MissingSeries(policies));
    }
    let mut values: Vec<String> = rows.iter().map(|r| r.sweep_value.clone()).collect();
    values.sort_by(|a, b| sort_key(a).partial_cmp(&sort_key(b)).expect("finite keys"));
    values.dedup();
    let s = series(rows);
    let mean = |p: &str, v: &str| -> Option<(f64, f64)> {
        let xs = s.get(&(p.to_string(), v.to_string()))?;
        let n = xs.len() as f64;
        Some((xs.iter().map(|x| x.1).sum::<f64>() / n, xs.iter().map(|x| x.2).sum::<f64>() / n))
    };
    let target = if policies.iter().any(|p| p == "ec") {
        "ec".to_string()
    } else {
        policies.last().expect("two policies").clone()
    };
    let mut ratios = Vec::new();
    for v in &values {
        let Some((tt, tl)) = mean(&target, v) else { continue };
        for p in policies.iter().filter(|p| **p != target) {
            let Some((bt, bl)) = mean(p, v) else { continue };
            ratios.push(Ratio {
                sweep_value: v.clone(),
                policy: target.clone(),
                baseline: p.clone(),
                throughput_ratio: ratio(tt, bt),
                latency_ratio: ratio(tl, bl),
            });
        }
    }
    if ratios.is_empty() {
        return Err(BenchError::MissingSeries(policies));
    }
    let sweep_parameter = rows.first().map(|r| r.sweep_parameter.clone()).unwrap_or_default();
    let trends = if sweep_parameter.ends_with("shuffles_per_minute") {
        shuffle_trends(rows, &s, &values)
    } else {
        Vec::new()
    };
    Ok(Report {
        sweep_parameter,
        ratios,
        trends,
    })
}

/// Directional checks of a shuffle-rate sweep.
fn shuffle_trends(rows: &[SummaryRow], s: &Series, values: &[String]) -> Vec<TrendCheck> {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let num = |v: &str| v.parse::<f64>().ok();
    let (Some(lo), Some(hi)) = (
        values.iter().find(|v| num(v) == Some(0.0)),
        values.iter().rev().find(|v| num(v).is_some_and(|x| x > 0.0)),
    ) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (policy, bound, keep) in [("ec", 0.7, true), ("rc", 0.5, false)] {
        if !s.contains_key(&(policy.to_string(), lo.clone())) {
            continue;
        }
        let (passed, yes, n) = majority(&seeds, |sd| {
            let r = seed_value(s, policy, hi, sd)? / seed_value(s, policy, lo, sd)?;
            Some(if keep { r >= bound } else { r <= bound })
        });
        let op = if keep { ">=" } else { "<=" };
        out.push(TrendCheck {
            name: format!("{policy} throughput at {hi} {op} {:.0}% of {lo}", bound * 100.0),
            passed,
            detail: format!("{yes}/{n} seeds"),
        });
    }
    if s.keys().any(|(p, _)| p == "static") && s.keys().any(|(p, _)| p == "ec") {
        for v in values.iter().filter(|v| num(v).is_some_and(|x| x >= 1.0)) {
            let (passed, yes, n) = majority(&seeds, |sd| {
                Some(seed_value(s, "static", v, sd)? <= seed_value(s, "ec", v, sd)?)
            });
            out.push(TrendCheck {
                name: format!("static <= ec at {v}"),
                passed,
                detail: format!("{yes}/{n} seeds"),
            });
        }
    }
    out
}

pub fn compare_policies(dir: &Path) -> Result<Report, BenchError> {
    compare_rows(&read_summary(&dir.join("summary.csv"))?)
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Policy comparison\n");
        let _ = writeln!(s, "Sweep: `{}`\n", self.sweep_parameter);
        let _ = writeln!(s, "| sweep | policy | baseline | throughput ratio | latency ratio |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for r in &self.ratios {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {:.3} | {:.3} |",
                r.sweep_value, r.policy, r.baseline, r.throughput_ratio, r.latency_ratio
            );
        }
        if !self.trends.is_empty() {
            let _ = writeln!(s, "\n## Trends\n");
            for t in &self.trends {
                let mark = if t.passed { "PASS" } else { "FAIL" };
                let _ = writeln!(s, "- {mark} {} ({})", t.name, t.detail);
            }
        }
        s
    }
}

/// Lengths of the post-shuffle periods with throughput below
/// `fraction × steady`. Windows that are still fine right after a shuffle
/// (detection lag) are skipped; the episode lasts from the shuffle to the
/// end of the first low run, and never past the next shuffle.
pub fn transient_durations(trace: &Trace, shuffle_times: &[f64], steady: f64, fraction: f64) -> Vec<f64> {
    let limit = fraction * steady;
    let mut out = Vec::new();
    for (n, &t0) in shuffle_times.iter().enumerate() {
        let t1 = shuffle_times.get(n + 1).copied().unwrap_or(f64::INFINITY);
        let mut last_low: Option<f64> = None;
        for w in trace.windows.iter().filter(|w| w.window_end_s > t0 && w.window_end_s <= t1) {
            if w.throughput_tps < limit {
                last_low = Some(w.window_end_s);
            } else if last_low.is_some() {
                break;
            }
        }
        out.push(last_low.map_or(0.0, |end| end - t0));
    }
    out
}

/// Shuffle instants of a run at `omega` permutations per minute.
pub fn shuffle_times(omega: f64, duration: f64) -> Vec<f64> {
    if omega <= 0.0 {
        return Vec::new();
    }
    let iv = 60.0 / omega;
    (1..).map(|k| k as f64 * iv).take_while(|t| *t < duration).collect()
}
