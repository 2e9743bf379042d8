//! Bandwidth traces: parsing, looped lookup, and seeded corpus splits.
//!
//! A trace file is line-oriented text with two whitespace-separated numbers
//! per line, the timestamp in seconds and the bandwidth in Mbps. Blank lines
//! and lines starting with `#` are ignored. A corpus is a directory of such
//! files, named after the directory.
//!
//! Traces loop: the last timestamp is the trace duration, and a lookup at
//! time `t` reads the sample in effect at `t mod duration` (zero-order hold).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{name}: line {line}: expected `<seconds> <mbps>`, got {content:?}")]
    MalformedLine {
        name: String,
        line: usize,
        content: String,
    },
    #[error("{name}: line {line}: timestamps must be strictly increasing and non-negative")]
    NonMonotonicTime { name: String, line: usize },
    #[error("{name}: line {line}: negative or non-finite bandwidth")]
    NegativeBandwidth { name: String, line: usize },
    #[error("{name}: a trace needs at least 2 samples, found {found}")]
    TooFewSamples { name: String, found: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate trace name {0:?} in corpus")]
    DuplicateName(String),
    #[error("trace {0:?} listed in manifest is not in the corpus")]
    UnknownTrace(String),
    #[error("split fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One `(timestamp seconds, bandwidth Mbps)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub time: f64,
    pub mbps: f64,
}

/// A validated, immutable bandwidth time series.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthTrace {
    name: String,
    samples: Vec<Sample>,
}

impl BandwidthTrace {
    /// Builds a trace from samples, enforcing the ordering and sign invariants.
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self, TraceError> {
        let name = name.into();
        if samples.len() < 2 {
            return Err(TraceError::TooFewSamples {
                name,
                found: samples.len(),
            });
        }
        let mut prev: Option<f64> = None;
        for (i, s) in samples.iter().enumerate() {
            let ok_time = s.time.is_finite()
                && s.time >= 0.0
                && prev.is_none_or(|p| s.time > p);
            if !ok_time {
                return Err(TraceError::NonMonotonicTime { name, line: i + 1 });
            }
            if !(s.mbps.is_finite() && s.mbps >= 0.0) {
                return Err(TraceError::NegativeBandwidth { name, line: i + 1 });
            }
            prev = Some(s.time);
        }
        Ok(Self { name, samples })
    }

    /// Convenience constructor from `(seconds, mbps)` pairs.
    pub fn from_pairs(name: impl Into<String>, pairs: &[(f64, f64)]) -> Result<Self, TraceError> {
        Self::new(
            name,
            pairs
                .iter()
                .map(|&(time, mbps)| Sample { time, mbps })
                .collect(),
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Loop period: the last timestamp.
    pub fn duration(&self) -> f64 {
        self.samples[self.samples.len() - 1].time
    }

    /// Number of piecewise-constant segments in one loop. The final sample
    /// only marks the end of the loop.
    pub(crate) fn segment_count(&self) -> usize {
        self.samples.len() - 1
    }

    /// `(start, end, mbps)` of segment `i` in loop-relative time. The first
    /// segment starts at 0 even when the first timestamp is positive, so a
    /// loop has no gaps.
    pub(crate) fn segment(&self, i: usize) -> (f64, f64, f64) {
        let start = if i == 0 { 0.0 } else { self.samples[i].time };
        (start, self.samples[i + 1].time, self.samples[i].mbps)
    }

    /// Megabits transferable over one full loop.
    pub fn loop_volume(&self) -> f64 {
        (0..self.segment_count())
            .map(|i| {
                let (a, b, bw) = self.segment(i);
                (b - a) * bw
            })
            .sum()
    }

    /// Index of the segment containing loop-relative time `pos` (`0 <= pos < duration`).
    pub(crate) fn segment_index(&self, pos: f64) -> usize {
        // last sample with timestamp <= pos, clamped into the segment range
        let idx = self.samples.partition_point(|s| s.time <= pos);
        idx.saturating_sub(1).min(self.segment_count() - 1)
    }

    /// Loop-relative position of absolute time `t`.
    pub(crate) fn wrap(&self, t: f64) -> f64 {
        let d = self.duration();
        let p = t.rem_euclid(d);
        // rem_euclid can round up to exactly d for t just below a multiple
        if p >= d {
            0.0
        } else {
            p
        }
    }

    /// Bandwidth in effect at absolute time `t >= 0`.
    pub fn bandwidth_at(&self, t: f64) -> f64 {
        let pos = self.wrap(t);
        self.samples[self.segment_index(pos)].mbps
    }

    /// Time-weighted mean bandwidth over one loop.
    pub fn mean_bandwidth(&self) -> f64 {
        self.loop_volume() / self.duration()
    }

    /// Minimum and maximum bandwidth over the samples that carry time in the loop.
    pub fn bandwidth_range(&self) -> (f64, f64) {
        (0..self.segment_count())
            .map(|i| self.samples[i].mbps)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Renders the trace in the two-column file format. Floats use the
    /// shortest representation that round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let _ = writeln!(out, "{:?} {:?}", s.time, s.mbps);
        }
        out
    }
}

/// Parses a trace file's contents.
pub fn parse_trace(text: &str, name: &str) -> Result<BandwidthTrace, TraceError> {
    let mut samples = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = || TraceError::MalformedLine {
            name: name.to_string(),
            line: i + 1,
            content: raw.to_string(),
        };
        let mut fields = line.split_whitespace();
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(malformed());
        };
        let time: f64 = a.parse().map_err(|_| malformed())?;
        let mbps: f64 = b.parse().map_err(|_| malformed())?;
        samples.push(Sample { time, mbps });
        lines.push(i + 1);
    }
    // re-map sample indices in validation errors back to file line numbers
    BandwidthTrace::new(name, samples).map_err(|e| match e {
        TraceError::NonMonotonicTime { name, line } => TraceError::NonMonotonicTime {
            name,
            line: lines[line - 1],
        },
        TraceError::NegativeBandwidth { name, line } => TraceError::NegativeBandwidth {
            name,
            line: lines[line - 1],
        },
        other => other,
    })
}

/// Reads and parses a single trace file; the trace is named after the file name.
pub fn load_trace(path: &Path) -> Result<BandwidthTrace, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_trace(&text, &name)
}

/// A named set of traces with unique names.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceCorpus {
    source: String,
    traces: Vec<BandwidthTrace>,
}

impl TraceCorpus {
    pub fn new(source: impl Into<String>, traces: Vec<BandwidthTrace>) -> Result<Self, TraceError> {
        let mut seen = HashSet::new();
        for t in &traces {
            if !seen.insert(t.name()) {
                return Err(TraceError::DuplicateName(t.name().to_string()));
            }
        }
        Ok(Self {
            source: source.into(),
            traces,
        })
    }

    /// Loads every regular file in `dir` (sorted by file name) as a trace.
    /// Hidden files are skipped.
    pub fn load_dir(dir: &Path) -> Result<Self, TraceError> {
        let io = |source| TraceError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(io)?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| {
                p.is_file()
                    && !p
                        .file_name()
                        .is_some_and(|n| n.to_string_lossy().starts_with('.'))
            })
            .collect();
        paths.sort();
        let traces = paths
            .iter()
            .map(|p| load_trace(p))
            .collect::<Result<Vec<_>, _>>()?;
        let source = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Self::new(source, traces)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn traces(&self) -> &[BandwidthTrace] {
        &self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&BandwidthTrace> {
        self.traces.iter().find(|t| t.name() == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.traces.iter().map(|t| t.name()).collect()
    }

    /// Sub-corpus containing the named traces, in manifest order.
    pub fn select(&self, names: &[String]) -> Result<TraceCorpus, TraceError> {
        let traces = names
            .iter()
            .map(|n| {
                self.get(n)
                    .cloned()
                    .ok_or_else(|| TraceError::UnknownTrace(n.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        TraceCorpus::new(self.source.clone(), traces)
    }

    /// Manifest text: one trace name per line.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for t in &self.traces {
            out.push_str(t.name());
            out.push('\n');
        }
        out
    }
}

/// Parses manifest text back into trace names.
pub fn parse_manifest(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Seeded shuffle-and-cut. The train side gets `round(fraction * n)` traces.
pub fn split_corpus(
    corpus: &TraceCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(TraceCorpus, TraceCorpus), TraceError> {
    if corpus.is_empty() {
        return Err(TraceError::EmptyCorpus);
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(TraceError::BadFraction(train_fraction));
    }
    let n = corpus.len();
    let cut = ((train_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| idx.iter().map(|&i| corpus.traces[i].clone()).collect();
    let train = TraceCorpus {
        source: corpus.source.clone(),
        traces: pick(&order[..cut]),
    };
    let test = TraceCorpus {
        source: corpus.source.clone(),
        traces: pick(&order[cut..]),
    };
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_step() -> BandwidthTrace {
        BandwidthTrace::from_pairs("t", &[(0.0, 1.0), (10.0, 4.0)]).unwrap()
    }

    #[test]
    fn parses_two_columns() {
        let t = parse_trace("0 1.0\n2 3.5", "x").unwrap();
        assert_eq!(
            t.samples(),
            &[
                Sample { time: 0.0, mbps: 1.0 },
                Sample { time: 2.0, mbps: 3.5 }
            ]
        );
    }

    #[test]
    fn skips_comments_and_blank_lines() {
        let t = parse_trace("# header\n\n0 1\n  \n# mid\n1\t2\n", "x").unwrap();
        assert_eq!(t.samples().len(), 2);
    }

    #[test]
    fn equal_timestamps_rejected() {
        assert!(matches!(
            parse_trace("0 1.0\n0 2.0", "x"),
            Err(TraceError::NonMonotonicTime { line: 2, .. })
        ));
    }

    #[test]
    fn negative_bandwidth_rejected() {
        assert!(matches!(
            parse_trace("0 1.0\n5 -1", "x"),
            Err(TraceError::NegativeBandwidth { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_line_reports_file_line() {
        match parse_trace("# c\n0 1\nabc def\n", "x") {
            Err(TraceError::MalformedLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_trace("0 1 2\n1 1", "x"),
            Err(TraceError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn single_sample_rejected() {
        assert!(matches!(
            parse_trace("0 1\n", "x"),
            Err(TraceError::TooFewSamples { found: 1, .. })
        ));
    }

    #[test]
    fn lookup_within_and_across_loops() {
        let t = two_step();
        assert_eq!(t.bandwidth_at(5.0), 1.0);
        assert_eq!(t.bandwidth_at(15.0), 1.0);
        // t = duration wraps to the start of the next loop
        assert_eq!(t.bandwidth_at(10.0), 1.0);
        assert_eq!(t.bandwidth_at(0.0), 1.0);
    }

    #[test]
    fn boundary_takes_new_sample() {
        let t = BandwidthTrace::from_pairs("t", &[(0.0, 1.0), (10.0, 4.0), (20.0, 2.0)]).unwrap();
        assert_eq!(t.bandwidth_at(9.999), 1.0);
        assert_eq!(t.bandwidth_at(10.0), 4.0);
        assert_eq!(t.bandwidth_at(30.0), 4.0);
    }

    #[test]
    fn positive_first_timestamp_holds_first_sample() {
        let t = BandwidthTrace::from_pairs("t", &[(2.0, 3.0), (4.0, 5.0), (6.0, 1.0)]).unwrap();
        assert_eq!(t.bandwidth_at(1.0), 3.0);
        assert_eq!(t.loop_volume(), 4.0 * 3.0 + 2.0 * 5.0);
    }

    #[test]
    fn mean_is_time_weighted_until_wrap() {
        let t = two_step();
        assert_eq!(t.duration(), 10.0);
        assert_eq!(t.mean_bandwidth(), 1.0);
    }

    fn corpus(n: usize) -> TraceCorpus {
        let traces = (0..n)
            .map(|i| BandwidthTrace::from_pairs(format!("t{i}"), &[(0.0, 1.0), (1.0, 1.0)]).unwrap())
            .collect();
        TraceCorpus::new("c", traces).unwrap()
    }

    #[test]
    fn split_sizes() {
        let (a, b) = split_corpus(&corpus(4), 0.75, 7).unwrap();
        assert_eq!((a.len(), b.len()), (3, 1));
        let (a, b) = split_corpus(&corpus(4), 1.0, 7).unwrap();
        assert_eq!((a.len(), b.len()), (4, 0));
    }

    #[test]
    fn split_is_deterministic() {
        let c = corpus(9);
        assert_eq!(split_corpus(&c, 0.5, 3).unwrap(), split_corpus(&c, 0.5, 3).unwrap());
    }

    #[test]
    fn split_rejects_empty() {
        let c = TraceCorpus::new("c", vec![]).unwrap();
        assert!(matches!(split_corpus(&c, 0.5, 1), Err(TraceError::EmptyCorpus)));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = two_step();
        assert!(matches!(
            TraceCorpus::new("c", vec![t.clone(), t]),
            Err(TraceError::DuplicateName(_))
        ));
    }

    #[test]
    fn manifest_select_round_trip() {
        let c = corpus(5);
        let (train, _) = split_corpus(&c, 0.6, 11).unwrap();
        let names = parse_manifest(&train.manifest());
        assert_eq!(c.select(&names).unwrap().traces(), train.traces());
    }
}
