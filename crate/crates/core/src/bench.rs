//! Round-trip latency benchmark through the full client/server path.
//!
//! Each sample times one `act` call: serialization (and JPEG encoding, when
//! enabled), transport, server-side decode and dispatch, and decoding of the
//! reply. Observations are synthesized once before the loop.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::client::{ConnectOptions, PolicyClient};
use crate::error::{Error, Result};
use crate::fixtures::{gradient_image, noise_image};
use crate::image::CompressionPolicy;
use crate::obs::{compress_cameras, Gripper, Obs};
use crate::value::{Map, NdArray, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    Shm,
    StreamLocal,
    StreamRemote,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::Shm => "shm",
            BenchMode::StreamLocal => "stream-local",
            BenchMode::StreamRemote => "stream-remote",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fixture {
    /// Seeded white noise; the worst case for JPEG.
    Noise,
    Gradient,
}

impl FromStr for Fixture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Fixture::Noise),
            "gradient" => Ok(Fixture::Gradient),
            _ => Err(Error::Config(format!("unknown fixture {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub mode: BenchMode,
    pub n_cameras: usize,
    pub image_size: usize,
    pub iterations: usize,
    pub warmup: usize,
    /// JPEG quality for stream modes; `None` sends raw arrays.
    pub jpeg_quality: Option<u8>,
    pub action_dim: usize,
    pub batch: usize,
    pub fixture: Fixture,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            mode: BenchMode::Shm,
            n_cameras: 2,
            image_size: 224,
            iterations: 1000,
            warmup: 100,
            jpeg_quality: Some(crate::image::DEFAULT_JPEG_QUALITY),
            action_dim: 7,
            batch: 1,
            fixture: Fixture::Noise,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch == 0 || self.image_size == 0 || self.action_dim == 0 {
            return Err(Error::Config("batch, image size and action dim must be positive".into()));
        }
        if let Some(q) = self.jpeg_quality {
            CompressionPolicy::jpeg(q)?;
        }
        Ok(())
    }

    fn compression(&self) -> CompressionPolicy {
        match self.jpeg_quality {
            Some(q) => CompressionPolicy {
                quality: q,
                ..CompressionPolicy::default()
            },
            None => CompressionPolicy::disabled(),
        }
    }

    /// The observation sent on every iteration.
    pub fn fixture_obs(&self) -> Result<Obs> {
        let image = |i: usize| match self.fixture {
            Fixture::Noise => noise_image(self.image_size, self.seed.wrapping_add(i as u64)),
            Fixture::Gradient => gradient_image(self.image_size, i as u64),
        };
        let mut obs = Obs::new();
        if self.batch == 1 {
            for c in 0..self.n_cameras {
                obs.cameras.insert(format!("cam{c}"), image(c));
            }
            obs.gripper = Some(Gripper::Single(0.5));
        } else {
            let s = self.image_size;
            for c in 0..self.n_cameras {
                let mut data = Vec::with_capacity(self.batch * s * s * 3);
                for b in 0..self.batch {
                    data.extend_from_slice(image(c * self.batch + b).as_u8().unwrap());
                }
                obs.cameras.insert(format!("cam{c}"), NdArray::from_u8(vec![self.batch, s, s, 3], data)?);
            }
            obs.gripper = Some(Gripper::Batched(vec![0.5; self.batch]));
            obs.batch = Some(self.batch);
        }
        obs.validate()?;
        Ok(obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub transport: String,
    pub iterations: usize,
    pub warmup: usize,
    /// Per-iteration round-trip times in seconds.
    pub samples: Vec<f64>,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub min: f64,
    pub max: f64,
    pub p99_over_p50: f64,
    /// Uncompressed camera octets per request.
    pub raw_bytes: usize,
    /// Camera octets as sent, after any JPEG encoding.
    pub camera_wire_bytes: usize,
    /// Full request payload octets.
    pub wire_bytes: usize,
    /// Iterations per second of measured time.
    pub rate_hz: f64,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl BenchReport {
    pub fn from_samples(mode: BenchMode, transport: &str, warmup: usize, samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("no samples to report".into()));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let total: f64 = samples.iter().sum();
        let p50 = percentile(&sorted, 50.0);
        let p99 = percentile(&sorted, 99.0);
        Ok(BenchReport {
            mode,
            transport: transport.to_owned(),
            iterations: samples.len(),
            warmup,
            mean: total / samples.len() as f64,
            p50,
            p95: percentile(&sorted, 95.0),
            p99,
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            p99_over_p50: if p50 > 0.0 { p99 / p50 } else { f64::INFINITY },
            raw_bytes: 0,
            camera_wire_bytes: 0,
            wire_bytes: 0,
            rate_hz: samples.len() as f64 / total,
            samples,
        })
    }
}

/// A benchmark that stopped early, with the samples taken so far.
#[derive(Debug, thiserror::Error)]
#[error("benchmark aborted after {} samples: {error}", samples.len())]
pub struct BenchFailure {
    pub samples: Vec<f64>,
    #[source]
    pub error: Error,
}

impl From<Error> for BenchFailure {
    fn from(error: Error) -> Self {
        BenchFailure {
            samples: Vec::new(),
            error,
        }
    }
}

/// Connects to `server_addr` and times `cfg.iterations` `act` calls after
/// `cfg.warmup` untimed ones.
pub fn run_rtt_bench(cfg: &BenchConfig, server_addr: &str) -> Result<BenchReport, BenchFailure> {
    cfg.validate()?;
    let obs = cfg.fixture_obs()?;
    let policy = cfg.compression();
    let opts = match cfg.mode {
        BenchMode::Shm => ConnectOptions::default(),
        BenchMode::StreamLocal | BenchMode::StreamRemote => ConnectOptions::stream().with_compression(policy),
    };
    let mut client = PolicyClient::connect(server_addr, opts)?;
    if cfg.mode == BenchMode::Shm && !client.mode().is_shared_memory() {
        return Err(Error::Protocol("shared memory was requested but the server is not reachable through it".into()).into());
    }
    let transport = client.mode().label();
    let mut kwargs = Map::new();
    kwargs.insert("seed".into(), Value::Int(cfg.seed as i64));
    client.initialize()?;
    client.reset(&obs, &Value::from("benchmark"), &kwargs)?;

    for _ in 0..cfg.warmup {
        client.act(&obs)?;
    }
    let mut samples = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let t = Instant::now();
        let r = client.act(&obs);
        let dt = t.elapsed().as_secs_f64();
        if let Err(error) = r {
            return Err(BenchFailure { samples, error });
        }
        samples.push(dt);
    }
    let wire_bytes = client.last_request_len();
    let _ = client.close();

    let camera_wire_bytes = if client_compresses(cfg) {
        let jpegs = compress_cameras(&obs, &policy)?;
        obs.cameras
            .iter()
            .map(|(k, a)| jpegs.get(k).map_or(a.byte_len(), Vec::len))
            .sum()
    } else {
        obs.raw_camera_bytes()
    };
    let mut report = BenchReport::from_samples(cfg.mode, transport, cfg.warmup, samples)?;
    report.raw_bytes = obs.raw_camera_bytes();
    report.camera_wire_bytes = camera_wire_bytes;
    report.wire_bytes = wire_bytes;
    Ok(report)
}

fn client_compresses(cfg: &BenchConfig) -> bool {
    cfg.mode != BenchMode::Shm && cfg.jpeg_quality.is_some()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Table,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

impl ReportFormat {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            Some("txt") => ReportFormat::Table,
            _ => ReportFormat::Csv,
        }
    }
}

fn summary_rows(r: &BenchReport) -> Vec<(&'static str, String)> {
    vec![
        ("mean", r.mean.to_string()),
        ("p50", r.p50.to_string()),
        ("p95", r.p95.to_string()),
        ("p99", r.p99.to_string()),
        ("min", r.min.to_string()),
        ("max", r.max.to_string()),
        ("p99_over_p50", r.p99_over_p50.to_string()),
        ("rate_hz", r.rate_hz.to_string()),
        ("raw_bytes", r.raw_bytes.to_string()),
        ("camera_wire_bytes", r.camera_wire_bytes.to_string()),
        ("wire_bytes", r.wire_bytes.to_string()),
    ]
}

/// Writes `report` to `out`.
///
/// CSV has an `iteration,rtt_seconds` header, one row per sample, then one
/// `name,value` row per summary statistic.
pub fn write_report<W: Write>(report: &BenchReport, format: ReportFormat, out: W) -> Result<()> {
    if report.samples.is_empty() {
        return Err(Error::Config("refusing to write an empty report".into()));
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
            w.write_record(["iteration", "rtt_seconds"]).map_err(io)?;
            for (i, s) in report.samples.iter().enumerate() {
                w.write_record([i.to_string(), s.to_string()]).map_err(io)?;
            }
            for (k, v) in summary_rows(report) {
                w.write_record([k, v.as_str()]).map_err(io)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            serde_json::to_writer_pretty(out, report).map_err(|e| Error::Io(e.into()))?;
        }
        ReportFormat::Table => {
            let mut out = out;
            let us = |s: f64| format!("{:>10.1} us", s * 1e6);
            writeln!(out, "mode        {} ({})", report.mode, report.transport)?;
            writeln!(out, "iterations  {} (+{} warmup)", report.iterations, report.warmup)?;
            writeln!(out, "mean        {}", us(report.mean))?;
            writeln!(out, "p50         {}", us(report.p50))?;
            writeln!(out, "p95         {}", us(report.p95))?;
            writeln!(out, "p99         {}", us(report.p99))?;
            writeln!(out, "min         {}", us(report.min))?;
            writeln!(out, "max         {}", us(report.max))?;
            writeln!(out, "p99/p50     {:>10.2}", report.p99_over_p50)?;
            writeln!(out, "rate        {:>10.1} Hz", report.rate_hz)?;
            writeln!(
                out,
                "cameras     {} raw -> {} on wire ({:.1}%)",
                report.raw_bytes,
                report.camera_wire_bytes,
                100.0 * report.camera_wire_bytes as f64 / report.raw_bytes.max(1) as f64
            )?;
            writeln!(out, "request     {} octets", report.wire_bytes)?;
        }
    }
    Ok(())
}

/// Writes `report` to `path`, or to stdout when `path` is `None`.
pub fn emit_report(report: &BenchReport, format: ReportFormat, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let f = std::fs::File::create(p)?;
            write_report(report, format, std::io::BufWriter::new(f))
        }
        None => write_report(report, format, std::io::stdout().lock()),
    }
}

/// Reads back the summary rows of a CSV report.
pub fn read_csv_summary(data: &[u8]) -> Result<(Vec<f64>, Map)> {
    let mut r = csv::Reader::from_reader(data);
    let mut samples = Vec::new();
    let mut summary = Map::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::decoding(0, e.to_string()))?;
        let (k, v) = (&rec[0], &rec[1]);
        let v: f64 = v.parse().map_err(|_| Error::decoding(0, format!("bad value {v:?}")))?;
        if k.parse::<usize>().is_ok() {
            samples.push(v);
        } else {
            summary.insert(k.to_owned(), Value::Real(v));
        }
    }
    Ok((samples, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&s, 50.0), 50.0);
        assert_eq!(percentile(&s, 99.0), 99.0);
        assert_eq!(percentile(&s, 100.0), 100.0);
        assert_eq!(percentile(&[7.0], 1.0), 7.0);
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(BenchReport::from_samples(BenchMode::Shm, "shm", 0, vec![]).is_err());
    }

    #[test]
    fn report_invariants() {
        let r = BenchReport::from_samples(BenchMode::Shm, "shm", 0, vec![0.002, 0.001, 0.003, 0.002]).unwrap();
        assert!(r.min <= r.mean && r.mean <= r.max);
        assert!((r.rate_hz - 4.0 / 0.008).abs() < 1e-9);
    }

    #[test]
    fn csv_layout() {
        let r = BenchReport::from_samples(BenchMode::StreamLocal, "stream", 0, vec![0.5, 0.25]).unwrap();
        let mut out = Vec::new();
        write_report(&r, ReportFormat::Csv, &mut out).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        assert!(text.starts_with("iteration,rtt_seconds\n0,0.5\n1,0.25\nmean,0.375\n"));
        let (samples, summary) = read_csv_summary(&out).unwrap();
        assert_eq!(samples, vec![0.5, 0.25]);
        assert_eq!(summary["mean"], Value::Real(0.375));
    }

    #[test]
    fn batched_fixture() {
        let cfg = BenchConfig {
            batch: 4,
            image_size: 8,
            ..Default::default()
        };
        let o = cfg.fixture_obs().unwrap();
        assert_eq!(o.batch, Some(4));
        assert_eq!(o.cameras["cam0"].shape(), &[4, 8, 8, 3]);
    }
}
