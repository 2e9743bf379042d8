//! The streaming environment.
//!
//! A client downloads fixed-duration chunks one after another over a looped
//! bandwidth trace (fluid model plus a fixed per-chunk latency), plays them
//! out of a bounded buffer, and scores each chunk with
//! `alpha * miou - beta * rebuffer - |bitrate - prev_bitrate|` (bitrates in Mbps).
//!
//! Buffer model per chunk: the buffer drains while the chunk downloads; any
//! shortfall is rebuffering. The finished chunk adds `chunk_duration` seconds,
//! and if that overflows the capacity the client idles (`wait`) until it fits.
//! The first chunk's download is startup delay: playback has not begun, so it
//! never counts as rebuffering.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{BitrateLadder, MetricsError, RateAccuracyTable};
use crate::nn::Features;
use crate::policies::{Policy, PolicyError};
use crate::trace::BandwidthTrace;

#[derive(Debug, Error)]
pub enum PlaybackError {
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("trace {0:?} carries no bandwidth over a full loop; download can never finish")]
    Stall(String),
    #[error("level {level} outside ladder of {levels} levels")]
    InvalidLevel { level: usize, levels: usize },
    #[error("episode already finished")]
    EpisodeDone,
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Everything that defines one streaming session, independent of the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    /// Selectable bitrates, kbps.
    pub ladder: BitrateLadder,
    /// Seconds of video per chunk.
    pub chunk_duration: f64,
    /// Playback buffer capacity, seconds.
    pub buffer_capacity: f64,
    /// Fixed per-chunk request latency, seconds.
    pub rtt: f64,
    pub total_chunks: usize,
    /// Weight of the accuracy (MIoU) term.
    pub alpha: f64,
    /// Weight of the rebuffering term, per second.
    pub beta: f64,
    /// Codec whose rate-accuracy curve scores the chunks.
    pub codec: String,
    /// Past chunks visible in the observation.
    pub history_len: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            ladder: BitrateLadder::default(),
            chunk_duration: 4.0,
            buffer_capacity: 60.0,
            rtt: 0.08,
            total_chunks: 48,
            alpha: 9.6,
            beta: 4.3,
            codec: "abrvsc".to_string(),
            history_len: 8,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), PlaybackError> {
        let fail = |m: &str| Err(PlaybackError::Config(m.to_string()));
        if !(self.chunk_duration > 0.0 && self.chunk_duration.is_finite()) {
            return fail("chunk_duration must be positive");
        }
        if !(self.buffer_capacity > 0.0 && self.buffer_capacity.is_finite()) {
            return fail("buffer_capacity must be positive");
        }
        if !(self.rtt >= 0.0 && self.rtt.is_finite()) {
            return fail("rtt must be non-negative");
        }
        if self.total_chunks == 0 {
            return fail("total_chunks must be at least 1");
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return fail("alpha and beta must be non-negative");
        }
        if self.history_len == 0 {
            return fail("history_len must be at least 1");
        }
        // ladder invariants are re-checked in case the struct was built by hand
        BitrateLadder::new(self.ladder.levels().to_vec())?;
        Ok(())
    }

    pub fn level_count(&self) -> usize {
        self.ladder.len()
    }
}

/// Size of one chunk at `level`, megabits.
pub fn chunk_size(level: usize, config: &SessionConfig) -> f64 {
    config.ladder.kbps(level) * config.chunk_duration / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Download {
    pub download_time: f64,
    pub end_time: f64,
}

/// Fluid download of `size_mb` starting at `start_time`: the request spends
/// `rtt`, then data drains at the trace's instantaneous bandwidth.
pub fn download_chunk(
    trace: &BandwidthTrace,
    start_time: f64,
    size_mb: f64,
    rtt: f64,
) -> Result<Download, PlaybackError> {
    // elapsed time is accumulated on its own so short downloads late in a
    // session keep full precision
    let mut elapsed = rtt;
    let mut remaining = size_mb;
    if remaining > 0.0 {
        let volume = trace.loop_volume();
        if !(volume > 0.0) {
            return Err(PlaybackError::Stall(trace.name().to_string()));
        }
        let segments = trace.segment_count();
        let period = trace.duration();
        let mut pos = trace.wrap(start_time + rtt);
        let mut seg = trace.segment_index(pos);
        loop {
            let (_, end, bw) = trace.segment(seg);
            let span = end - pos;
            let capacity = bw * span;
            if bw > 0.0 && capacity >= remaining {
                elapsed += remaining / bw;
                break;
            }
            remaining -= capacity;
            elapsed += span;
            seg += 1;
            pos = end;
            if seg == segments {
                seg = 0;
                pos = 0.0;
                // jump over whole loops, keeping some data for the final partial loop
                let loops = (remaining / volume).ceil() - 1.0;
                if loops >= 1.0 {
                    elapsed += loops * period;
                    remaining -= loops * volume;
                }
            }
        }
    }
    Ok(Download {
        download_time: elapsed,
        end_time: start_time + elapsed,
    })
}

/// Outcome of adding one downloaded chunk to the buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferStep {
    /// Stall time while the buffer was empty.
    pub rebuffer: f64,
    /// Idle time spent waiting for room in a full buffer.
    pub wait: f64,
    /// Buffer level after the download finished, before the chunk was added.
    pub drained: f64,
    pub new_buffer: f64,
}

pub fn advance_buffer(buffer: f64, download_time: f64, config: &SessionConfig) -> BufferStep {
    let rebuffer = (download_time - buffer).max(0.0);
    let drained = (buffer - download_time).max(0.0);
    let candidate = drained + config.chunk_duration;
    let wait = (candidate - config.buffer_capacity).max(0.0);
    let new_buffer = candidate.min(config.buffer_capacity);
    BufferStep {
        rebuffer,
        wait,
        drained,
        new_buffer,
    }
}

/// Buffer outcome of the first chunk. Playback has not started while it
/// downloads, so that time is startup delay rather than rebuffering.
pub fn startup_buffer(config: &SessionConfig) -> BufferStep {
    BufferStep {
        rebuffer: 0.0,
        wait: (config.chunk_duration - config.buffer_capacity).max(0.0),
        drained: 0.0,
        new_buffer: config.chunk_duration.min(config.buffer_capacity),
    }
}

/// The three additive parts of a chunk's QoE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QoeTerms {
    pub accuracy: f64,
    pub rebuffer: f64,
    pub smoothness: f64,
}

impl QoeTerms {
    pub fn total(&self) -> f64 {
        self.accuracy - self.rebuffer - self.smoothness
    }
}

/// Per-chunk QoE. Bitrates are in Mbps.
pub fn qoe_chunk(
    miou: f64,
    rebuffer: f64,
    bitrate_mbps: f64,
    prev_bitrate_mbps: f64,
    alpha: f64,
    beta: f64,
) -> (f64, QoeTerms) {
    let terms = QoeTerms {
        accuracy: alpha * miou,
        rebuffer: beta * rebuffer,
        smoothness: (bitrate_mbps - prev_bitrate_mbps).abs(),
    };
    (terms.total(), terms)
}

/// What the controller observes before choosing the next chunk's level.
/// Values are raw (Mbps, seconds, megabits, index, count); [`EnvState::features`]
/// applies the fixed network normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// Measured throughput of the last `k` chunks, oldest first, Mbps; zero-padded on the left.
    pub throughput_hist: Vec<f64>,
    /// Download times of the last `k` chunks, seconds; zero-padded on the left.
    pub download_hist: Vec<f64>,
    /// Size of the next chunk at each ladder level, megabits.
    pub next_sizes: Vec<f64>,
    /// Buffer occupancy, seconds.
    pub buffer: f64,
    /// Ladder index of the last chunk (0 before the first chunk).
    pub last_level: usize,
    /// Chunks not yet downloaded.
    pub remaining: usize,
    pub total_chunks: usize,
}

pub const DOWNLOAD_TIME_SCALE: f64 = 10.0;
pub const BUFFER_SCALE: f64 = 10.0;

impl EnvState {
    pub fn level_count(&self) -> usize {
        self.next_sizes.len()
    }

    pub fn history_len(&self) -> usize {
        self.throughput_hist.len()
    }

    /// True before any chunk has been played.
    pub fn is_first_chunk(&self) -> bool {
        self.remaining == self.total_chunks
    }

    /// Normalized network input.
    pub fn features(&self) -> Features {
        let m = self.level_count();
        let level_scale = if m > 1 { (m - 1) as f64 } else { 1.0 };
        Features {
            throughput: self.throughput_hist.clone(),
            download: self
                .download_hist
                .iter()
                .map(|d| d / DOWNLOAD_TIME_SCALE)
                .collect(),
            sizes: self.next_sizes.clone(),
            scalars: [
                self.buffer / BUFFER_SCALE,
                self.last_level as f64 / level_scale,
                self.remaining as f64 / self.total_chunks as f64,
            ],
        }
    }
}

/// One played chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkRecord {
    /// 1-based chunk number.
    pub index: usize,
    pub level: usize,
    pub bitrate_kbps: f64,
    pub download_time: f64,
    pub rebuffer: f64,
    pub wait: f64,
    pub miou: f64,
    pub qoe: f64,
    pub terms: QoeTerms,
}

impl ChunkRecord {
    /// Throughput measured over the data-transfer part of the download, Mbps.
    pub fn throughput(&self, config: &SessionConfig) -> f64 {
        let transfer = self.download_time - config.rtt;
        if transfer > 0.0 {
            (self.bitrate_kbps * config.chunk_duration / 1000.0) / transfer
        } else {
            0.0
        }
    }
}

/// Builds the observation from the chunks played so far.
pub fn assemble_state(played: &[ChunkRecord], buffer: f64, config: &SessionConfig) -> EnvState {
    let k = config.history_len;
    let recent = &played[played.len().saturating_sub(k)..];
    let pad = k - recent.len();
    let mut throughput_hist = vec![0.0; pad];
    let mut download_hist = vec![0.0; pad];
    for r in recent {
        throughput_hist.push(r.throughput(config));
        download_hist.push(r.download_time);
    }
    EnvState {
        throughput_hist,
        download_hist,
        next_sizes: (0..config.level_count())
            .map(|l| chunk_size(l, config))
            .collect(),
        buffer,
        last_level: played.last().map_or(0, |r| r.level),
        remaining: config.total_chunks - played.len(),
        total_chunks: config.total_chunks,
    }
}

/// Result of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: ChunkRecord,
    pub state: EnvState,
    pub done: bool,
}

/// Single-owner mutable session over one trace.
pub struct StreamingEnv<'a> {
    trace: &'a BandwidthTrace,
    config: &'a SessionConfig,
    table: &'a RateAccuracyTable,
    clock: f64,
    buffer: f64,
    records: Vec<ChunkRecord>,
}

impl<'a> StreamingEnv<'a> {
    pub fn new(
        trace: &'a BandwidthTrace,
        config: &'a SessionConfig,
        table: &'a RateAccuracyTable,
    ) -> Result<Self, PlaybackError> {
        config.validate()?;
        table.covers(&config.codec, &config.ladder)?;
        Ok(Self {
            trace,
            config,
            table,
            clock: 0.0,
            buffer: 0.0,
            records: Vec::with_capacity(config.total_chunks),
        })
    }

    pub fn config(&self) -> &SessionConfig {
        self.config
    }

    pub fn trace(&self) -> &BandwidthTrace {
        self.trace
    }

    pub fn table(&self) -> &RateAccuracyTable {
        self.table
    }

    /// Wall-clock time since the session started, seconds.
    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn buffer(&self) -> f64 {
        self.buffer
    }

    pub fn records(&self) -> &[ChunkRecord] {
        &self.records
    }

    pub fn is_done(&self) -> bool {
        self.records.len() >= self.config.total_chunks
    }

    pub fn state(&self) -> EnvState {
        assemble_state(&self.records, self.buffer, self.config)
    }

    /// Downloads and plays the next chunk at `level`.
    pub fn step(&mut self, level: usize) -> Result<StepOutcome, PlaybackError> {
        if self.is_done() {
            return Err(PlaybackError::EpisodeDone);
        }
        let levels = self.config.level_count();
        if level >= levels {
            return Err(PlaybackError::InvalidLevel { level, levels });
        }
        let cfg = self.config;
        let size = chunk_size(level, cfg);
        let dl = download_chunk(self.trace, self.clock, size, cfg.rtt)?;
        let buf = if self.records.is_empty() {
            startup_buffer(cfg)
        } else {
            advance_buffer(self.buffer, dl.download_time, cfg)
        };
        let bitrate_kbps = cfg.ladder.kbps(level);
        let miou = self.table.miou_at(&cfg.codec, bitrate_kbps)?;
        // the first chunk has no predecessor: no switching penalty
        let prev_mbps = self
            .records
            .last()
            .map_or(cfg.ladder.mbps(level), |r| r.bitrate_kbps / 1000.0);
        let (qoe, terms) = qoe_chunk(
            miou,
            buf.rebuffer,
            cfg.ladder.mbps(level),
            prev_mbps,
            cfg.alpha,
            cfg.beta,
        );
        let record = ChunkRecord {
            index: self.records.len() + 1,
            level,
            bitrate_kbps,
            download_time: dl.download_time,
            rebuffer: buf.rebuffer,
            wait: buf.wait,
            miou,
            qoe,
            terms,
        };
        self.clock += dl.download_time + buf.wait;
        self.buffer = buf.new_buffer;
        self.records.push(record.clone());
        Ok(StepOutcome {
            record,
            state: self.state(),
            done: self.is_done(),
        })
    }

    pub fn into_log(self) -> EpisodeLog {
        EpisodeLog::new(self.trace.name(), self.config.clone(), self.records)
    }
}

/// Per-chunk records of one full session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub trace: String,
    pub config: SessionConfig,
    pub records: Vec<ChunkRecord>,
    pub mean_qoe: f64,
}

pub const EPISODE_CSV_HEADER: &str =
    "n,level,bitrate_kbps,download_s,rebuffer_s,wait_s,miou,qoe,qoe_acc,qoe_rebuf,qoe_smooth";

/// Fixed 17-significant-digit rendering used by every CSV writer.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

impl EpisodeLog {
    pub fn new(trace: &str, config: SessionConfig, records: Vec<ChunkRecord>) -> Self {
        let mean_qoe = if records.is_empty() {
            0.0
        } else {
            records.iter().map(|r| r.qoe).sum::<f64>() / records.len() as f64
        };
        Self {
            trace: trace.to_string(),
            config,
            records,
            mean_qoe,
        }
    }

    /// Sum of download and idle time across the session.
    pub fn wall_time(&self) -> f64 {
        self.records.iter().map(|r| r.download_time + r.wait).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(EPISODE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.index,
                r.level,
                fmt_f64(r.bitrate_kbps),
                fmt_f64(r.download_time),
                fmt_f64(r.rebuffer),
                fmt_f64(r.wait),
                fmt_f64(r.miou),
                fmt_f64(r.qoe),
                fmt_f64(r.terms.accuracy),
                fmt_f64(r.terms.rebuffer),
                fmt_f64(r.terms.smoothness),
            );
        }
        out
    }
}

/// Plays a full session with `policy`, seeding its sampler from `seed`.
pub fn run_episode(
    policy: &dyn Policy,
    trace: &BandwidthTrace,
    config: &SessionConfig,
    table: &RateAccuracyTable,
    seed: u64,
) -> Result<EpisodeLog, PlaybackError> {
    let mut env = StreamingEnv::new(trace, config, table)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.state();
    while !env.is_done() {
        let decision = policy.decide(&state, &mut rng)?;
        state = env.step(decision.level)?.state;
    }
    Ok(env.into_log())
}
