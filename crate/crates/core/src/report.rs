//! Aggregation of episode logs into CDFs, means and pairwise gains.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::playback::{fmt_f64, EpisodeLog};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("empty input")]
    EmptyInput,
    #[error("zero baseline mean")]
    ZeroBaseline,
    #[error("scheme {scheme} was evaluated on a different trace set")]
    MismatchedTraceSets { scheme: String },
    #[error("duplicate scheme {0}")]
    DuplicateScheme(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Empirical CDF as `(value, cumulative fraction)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfSeries {
    pub metric: String,
    pub points: Vec<(f64, f64)>,
}

pub fn cdf(metric: &str, values: &[f64]) -> Result<CdfSeries, ReportError> {
    if values.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let points = sorted
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, if i + 1 == n { 1.0 } else { (i + 1) as f64 / n as f64 }))
        .collect();
    Ok(CdfSeries {
        metric: metric.to_string(),
        points,
    })
}

/// Quotes a CSV field when it holds a comma, quote or line break.
pub fn csv_field(s: &str) -> Cow<'_, str> {
    if s.contains([',', '"', '\n', '\r']) {
        Cow::Owned(format!("\"{}\"", s.replace('"', "\"\"")))
    } else {
        Cow::Borrowed(s)
    }
}

/// `100 (a - b) / |b|`.
pub fn relative_gain(a: f64, b: f64) -> Result<f64, ReportError> {
    if b == 0.0 {
        return Err(ReportError::ZeroBaseline);
    }
    Ok(100.0 * (a - b) / b.abs())
}

/// Pooled per-chunk metrics and means for one scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub scheme: String,
    pub miou: Vec<f64>,
    pub rebuffer: Vec<f64>,
    pub download: Vec<f64>,
    pub qoe: Vec<f64>,
    pub mean_miou: f64,
    pub mean_rebuffer: f64,
    pub mean_download: f64,
    pub mean_qoe: f64,
}

/// Metrics that get a CDF and a gain entry, in output order.
pub const METRICS: [&str; 4] = ["miou", "rebuffer_s", "download_s", "qoe"];

impl SchemeSummary {
    pub fn values(&self, metric: &str) -> &[f64] {
        match metric {
            "miou" => &self.miou,
            "rebuffer_s" => &self.rebuffer,
            "download_s" => &self.download,
            "qoe" => &self.qoe,
            _ => &[],
        }
    }

    pub fn mean(&self, metric: &str) -> f64 {
        match metric {
            "miou" => self.mean_miou,
            "rebuffer_s" => self.mean_rebuffer,
            "download_s" => self.mean_download,
            "qoe" => self.mean_qoe,
            _ => f64::NAN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gain {
    pub scheme_a: String,
    pub scheme_b: String,
    pub metric: String,
    /// `None` when the baseline mean is zero.
    pub percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// Schemes in declared order.
    pub schemes: Vec<SchemeSummary>,
    pub gains: Vec<Gain>,
    /// SHA-256 of the sorted evaluated trace names.
    pub trace_set_hash: String,
    /// Where the evaluated trace list came from (e.g. a manifest path).
    pub manifest: String,
    /// Free-form configuration lines echoed into the summary header.
    pub config_lines: Vec<String>,
    /// SHA-256 of `config_lines`.
    pub config_fingerprint: String,
}

fn sha256_hex(data: &[u8]) -> String {
    Sha256::digest(data)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn trace_set_hash(logs: &[EpisodeLog]) -> String {
    let mut names: Vec<&str> = logs.iter().map(|l| l.trace.as_str()).collect();
    names.sort_unstable();
    sha256_hex(names.join("\n").as_bytes())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pool(scheme: &str, logs: &[EpisodeLog]) -> Result<SchemeSummary, ReportError> {
    let records = logs.iter().flat_map(|l| l.records.iter());
    let miou: Vec<f64> = records.clone().map(|r| r.miou).collect();
    if miou.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let rebuffer: Vec<f64> = records.clone().map(|r| r.rebuffer).collect();
    let download: Vec<f64> = records.clone().map(|r| r.download_time).collect();
    let qoe: Vec<f64> = records.map(|r| r.qoe).collect();
    Ok(SchemeSummary {
        scheme: scheme.to_string(),
        mean_miou: mean(&miou),
        mean_rebuffer: mean(&rebuffer),
        mean_download: mean(&download),
        mean_qoe: mean(&qoe),
        miou,
        rebuffer,
        download,
        qoe,
    })
}

/// Pools every chunk of every log per scheme. All schemes must cover the
/// same set of traces. Logs within a scheme are pooled in trace-name order,
/// so the result does not depend on the order they were produced in.
pub fn summarize(
    schemes: &[(String, Vec<EpisodeLog>)],
    manifest: &str,
    config_lines: &[String],
) -> Result<ComparisonReport, ReportError> {
    let (_, first) = schemes.first().ok_or(ReportError::EmptyInput)?;
    let expected = trace_set_hash(first);
    let mut summaries = Vec::with_capacity(schemes.len());
    for (i, (name, logs)) in schemes.iter().enumerate() {
        if schemes[..i].iter().any(|(n, _)| n == name) {
            return Err(ReportError::DuplicateScheme(name.clone()));
        }
        if trace_set_hash(logs) != expected {
            return Err(ReportError::MismatchedTraceSets {
                scheme: name.clone(),
            });
        }
        let mut ordered: Vec<EpisodeLog> = logs.clone();
        ordered.sort_by(|a, b| a.trace.cmp(&b.trace));
        summaries.push(pool(name, &ordered)?);
    }
    let mut gains = Vec::new();
    for a in &summaries {
        for b in &summaries {
            if a.scheme == b.scheme {
                continue;
            }
            for metric in METRICS {
                gains.push(Gain {
                    scheme_a: a.scheme.clone(),
                    scheme_b: b.scheme.clone(),
                    metric: metric.to_string(),
                    percent: relative_gain(a.mean(metric), b.mean(metric)).ok(),
                });
            }
        }
    }
    Ok(ComparisonReport {
        schemes: summaries,
        gains,
        trace_set_hash: expected,
        manifest: manifest.to_string(),
        config_fingerprint: sha256_hex(config_lines.join("\n").as_bytes()),
        config_lines: config_lines.to_vec(),
    })
}

impl ComparisonReport {
    pub fn scheme(&self, name: &str) -> Option<&SchemeSummary> {
        self.schemes.iter().find(|s| s.scheme == name)
    }

    pub fn gain(&self, a: &str, b: &str, metric: &str) -> Option<f64> {
        self.gains
            .iter()
            .find(|g| g.scheme_a == a && g.scheme_b == b && g.metric == metric)
            .and_then(|g| g.percent)
    }

    pub fn comparison_csv(&self) -> String {
        let mut out = String::from("scheme,mean_miou,mean_rebuffer_s,mean_download_s,mean_qoe\n");
        for s in &self.schemes {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(&s.scheme),
                fmt_f64(s.mean_miou),
                fmt_f64(s.mean_rebuffer),
                fmt_f64(s.mean_download),
                fmt_f64(s.mean_qoe)
            );
        }
        out
    }

    pub fn gains_csv(&self) -> String {
        let mut out = String::from("scheme_a,scheme_b,metric,gain_percent\n");
        for g in &self.gains {
            let value = g.percent.map_or_else(|| "nan".to_string(), fmt_f64);
            let _ = writeln!(
                out,
                "{},{},{},{}",
                csv_field(&g.scheme_a),
                csv_field(&g.scheme_b),
                g.metric,
                value
            );
        }
        out
    }

    /// Fixed-width table of means plus gains of the first scheme over the rest.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "trace set: {} ({})", self.manifest, &self.trace_set_hash[..16]);
        let _ = writeln!(out, "config: {}", &self.config_fingerprint[..16]);
        for line in &self.config_lines {
            let _ = writeln!(out, "  {line}");
        }
        out.push('\n');
        let width = self.schemes.iter().map(|s| s.scheme.len()).max().unwrap_or(6).max(6);
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>11}  {:>11}  {:>9}",
            "scheme", "miou", "rebuffer_s", "download_s", "qoe"
        );
        for s in &self.schemes {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>11.4}  {:>11.4}  {:>9.4}",
                s.scheme, s.mean_miou, s.mean_rebuffer, s.mean_download, s.mean_qoe
            );
        }
        if let Some(head) = self.schemes.first() {
            out.push('\n');
            for other in &self.schemes[1..] {
                let fmt = |m: &str| match self.gain(&head.scheme, &other.scheme, m) {
                    Some(g) => format!("{g:+.2}%"),
                    None => "n/a".to_string(),
                };
                let _ = writeln!(
                    out,
                    "{} vs {}: qoe {}, miou {}",
                    head.scheme,
                    other.scheme,
                    fmt("qoe"),
                    fmt("miou")
                );
            }
        }
        out
    }

    /// Writes `comparison.csv`, `gains.csv`, `summary.txt` and one
    /// `cdf_<scheme>.csv` per scheme into `dir`.
    pub fn emit(&self, dir: &Path) -> Result<(), ReportError> {
        write(dir, "comparison.csv", &self.comparison_csv())?;
        write(dir, "gains.csv", &self.gains_csv())?;
        write(dir, "summary.txt", &self.summary_text())?;
        for s in &self.schemes {
            let series: Vec<CdfSeries> = METRICS
                .iter()
                .map(|m| cdf(m, s.values(m)))
                .collect::<Result<_, _>>()?;
            write(dir, &format!("cdf_{}.csv", file_stem(&s.scheme)), &cdf_csv(&series))?;
        }
        Ok(())
    }
}

/// Scheme names such as `rl:out/final.ckpt` made safe for file names.
pub fn file_stem(scheme: &str) -> String {
    scheme
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// `metric,value,fraction` rows for each series in order.
pub fn cdf_csv(series: &[CdfSeries]) -> String {
    let mut out = String::from("metric,value,fraction\n");
    for s in series {
        for (v, f) in &s.points {
            let _ = writeln!(out, "{},{},{}", s.metric, fmt_f64(*v), fmt_f64(*f));
        }
    }
    out
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), ReportError> {
    let io = |source, path: &Path| ReportError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| io(e, &path))
}
