//! Bitrate controllers.
//!
//! Every controller implements [`Policy`]: a read-only decision from the
//! current [`EnvState`], with any randomness drawn from a caller-owned RNG.
//! Ties are always broken toward the lower ladder index.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::metrics::{MetricsError, RateAccuracyTable};
use crate::nn::{self, NnError, ParameterSet};
use crate::playback::{
    advance_buffer, chunk_size, download_chunk, qoe_chunk, startup_buffer, EnvState,
    PlaybackError, SessionConfig,
};
use crate::trace::BandwidthTrace;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no measured throughput yet")]
    NoHistory,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("bad policy spec {spec:?}: {reason}")]
    Spec { spec: String, reason: String },
    #[error("invalid policy parameter: {0}")]
    Invalid(String),
    #[error("foresight planning failed: {0}")]
    Foresight(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDecision {
    pub level: usize,
    pub rationale: Option<String>,
}

impl PolicyDecision {
    pub fn level(level: usize) -> Self {
        Self {
            level,
            rationale: None,
        }
    }
}

pub trait Policy: Send + Sync {
    /// Spec-style name, e.g. `bb:5,10`.
    fn name(&self) -> String;

    fn decide(&self, state: &EnvState, rng: &mut dyn RngCore)
        -> Result<PolicyDecision, PolicyError>;
}

/// Always the same level.
#[derive(Debug, Clone, Copy)]
pub struct FixedPolicy {
    level: usize,
}

impl FixedPolicy {
    pub fn new(level: usize) -> Self {
        Self { level }
    }
}

impl Policy for FixedPolicy {
    fn name(&self) -> String {
        format!("fixed:{}", self.level)
    }

    fn decide(&self, _: &EnvState, _: &mut dyn RngCore) -> Result<PolicyDecision, PolicyError> {
        Ok(PolicyDecision::level(self.level))
    }
}

/// Buffer-based rate map: lowest level inside the reservoir, highest above
/// reservoir + cushion, linear (rounded down) in between.
#[derive(Debug, Clone, Copy)]
pub struct BufferBasedPolicy {
    reservoir: f64,
    cushion: f64,
}

impl BufferBasedPolicy {
    pub const DEFAULT_RESERVOIR: f64 = 5.0;
    pub const DEFAULT_CUSHION: f64 = 10.0;

    pub fn new(reservoir: f64, cushion: f64) -> Result<Self, PolicyError> {
        if !(reservoir >= 0.0 && cushion > 0.0) {
            return Err(PolicyError::Invalid(format!(
                "bb needs reservoir >= 0 and cushion > 0, got {reservoir}, {cushion}"
            )));
        }
        Ok(Self { reservoir, cushion })
    }

    pub fn level_for(&self, buffer: f64, levels: usize) -> usize {
        let top = levels - 1;
        if buffer <= self.reservoir {
            0
        } else if buffer >= self.reservoir + self.cushion {
            top
        } else {
            let frac = (buffer - self.reservoir) / self.cushion;
            ((frac * top as f64).floor() as usize).min(top)
        }
    }
}

impl Default for BufferBasedPolicy {
    fn default() -> Self {
        Self {
            reservoir: Self::DEFAULT_RESERVOIR,
            cushion: Self::DEFAULT_CUSHION,
        }
    }
}

impl Policy for BufferBasedPolicy {
    fn name(&self) -> String {
        format!("bb:{},{}", self.reservoir, self.cushion)
    }

    fn decide(&self, state: &EnvState, _: &mut dyn RngCore) -> Result<PolicyDecision, PolicyError> {
        Ok(PolicyDecision::level(
            self.level_for(state.buffer, state.level_count()),
        ))
    }
}

/// Harmonic mean of the measured (non-zero) throughputs.
pub fn harmonic_mean_predictor(past: &[f64]) -> Result<f64, PolicyError> {
    let (n, inv) = past
        .iter()
        .filter(|&&x| x > 0.0)
        .fold((0usize, 0.0), |(n, s), x| (n + 1, s + 1.0 / x));
    if n == 0 {
        return Err(PolicyError::NoHistory);
    }
    Ok(n as f64 / inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Most recent throughput samples fed to the predictor.
    pub window: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            window: 5,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.horizon == 0 || self.window == 0 {
            return Err(PolicyError::Invalid(
                "mpc horizon and window must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Best plan found by exhaustive search.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub levels: Vec<usize>,
    /// Sum of per-chunk QoE over the plan.
    pub score: f64,
}

/// Finite-horizon planner: enumerates every level sequence over the next
/// `min(horizon, remaining)` chunks and keeps the one with the highest
/// summed QoE, simulated with the environment's own buffer dynamics.
#[derive(Debug, Clone)]
pub struct MpcPolicy {
    cfg: MpcConfig,
    session: SessionConfig,
    table: RateAccuracyTable,
    miou: Vec<f64>,
}

/// How the planner obtains download times along a candidate plan.
trait DownloadModel {
    fn download_time(&self, clock: f64, size_mb: f64) -> Result<f64, PlaybackError>;
}

struct ConstantThroughput {
    mbps: f64,
    rtt: f64,
}

impl DownloadModel for ConstantThroughput {
    fn download_time(&self, _: f64, size_mb: f64) -> Result<f64, PlaybackError> {
        Ok(size_mb / self.mbps + self.rtt)
    }
}

struct Foresight<'a> {
    trace: &'a BandwidthTrace,
    rtt: f64,
}

impl DownloadModel for Foresight<'_> {
    fn download_time(&self, clock: f64, size_mb: f64) -> Result<f64, PlaybackError> {
        Ok(download_chunk(self.trace, clock, size_mb, self.rtt)?.download_time)
    }
}

struct SearchCtx<'a> {
    policy: &'a MpcPolicy,
    model: &'a dyn DownloadModel,
    horizon: usize,
    first_chunk: bool,
    path: Vec<usize>,
    best: Option<Plan>,
}

impl MpcPolicy {
    pub fn new(
        cfg: MpcConfig,
        session: SessionConfig,
        table: RateAccuracyTable,
    ) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let miou = session
            .ladder
            .levels()
            .iter()
            .map(|&b| table.miou_at(&session.codec, b))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            cfg,
            session,
            table,
            miou,
        })
    }

    pub fn config(&self) -> MpcConfig {
        self.cfg
    }

    pub fn table(&self) -> &RateAccuracyTable {
        &self.table
    }

    /// Throughput forecast from the last `window` history entries.
    pub fn predict(&self, state: &EnvState) -> Result<f64, PolicyError> {
        let hist = &state.throughput_hist;
        let recent = &hist[hist.len().saturating_sub(self.cfg.window)..];
        harmonic_mean_predictor(recent)
    }

    /// Plan against a constant predicted throughput.
    pub fn plan(&self, state: &EnvState, predicted_mbps: f64) -> Plan {
        let model = ConstantThroughput {
            mbps: predicted_mbps,
            rtt: self.session.rtt,
        };
        self.search(state, &model, 0.0)
            .expect("constant-throughput planning cannot stall")
    }

    /// Plan with the true future bandwidth: downloads are simulated on
    /// `trace` starting at wall-clock `clock`. Used to check the planner
    /// against global exhaustive search.
    pub fn plan_with_foresight(
        &self,
        state: &EnvState,
        trace: &BandwidthTrace,
        clock: f64,
    ) -> Result<Plan, PolicyError> {
        let model = Foresight {
            trace,
            rtt: self.session.rtt,
        };
        self.search(state, &model, clock)
            .map_err(|e| PolicyError::Foresight(e.to_string()))
    }

    fn search(
        &self,
        state: &EnvState,
        model: &dyn DownloadModel,
        clock: f64,
    ) -> Result<Plan, PlaybackError> {
        let horizon = self.cfg.horizon.min(state.remaining);
        let mut ctx = SearchCtx {
            policy: self,
            model,
            horizon,
            first_chunk: state.is_first_chunk(),
            path: Vec::with_capacity(horizon),
            best: None,
        };
        let prev = (!ctx.first_chunk).then_some(state.last_level);
        ctx.expand(state.buffer, clock, prev, 0.0)?;
        Ok(ctx.best.unwrap_or(Plan {
            levels: Vec::new(),
            score: 0.0,
        }))
    }
}

impl SearchCtx<'_> {
    fn expand(
        &mut self,
        buffer: f64,
        clock: f64,
        prev: Option<usize>,
        score: f64,
    ) -> Result<(), PlaybackError> {
        if self.path.len() == self.horizon {
            // levels are tried in ascending order, so ties keep the lower plan
            if self.best.as_ref().is_none_or(|b| score > b.score) {
                self.best = Some(Plan {
                    levels: self.path.clone(),
                    score,
                });
            }
            return Ok(());
        }
        let session = &self.policy.session;
        for level in 0..session.level_count() {
            let dl = self
                .model
                .download_time(clock, chunk_size(level, session))?;
            let step = if self.first_chunk && self.path.is_empty() {
                startup_buffer(session)
            } else {
                advance_buffer(buffer, dl, session)
            };
            let mbps = session.ladder.mbps(level);
            let prev_mbps = prev.map_or(mbps, |p| session.ladder.mbps(p));
            let (qoe, _) = qoe_chunk(
                self.policy.miou[level],
                step.rebuffer,
                mbps,
                prev_mbps,
                session.alpha,
                session.beta,
            );
            self.path.push(level);
            self.expand(
                step.new_buffer,
                clock + dl + step.wait,
                Some(level),
                score + qoe,
            )?;
            self.path.pop();
        }
        Ok(())
    }
}

impl Policy for MpcPolicy {
    fn name(&self) -> String {
        format!("mpc:{},{}", self.cfg.horizon, self.cfg.window)
    }

    fn decide(&self, state: &EnvState, _: &mut dyn RngCore) -> Result<PolicyDecision, PolicyError> {
        let predicted = match self.predict(state) {
            Ok(p) => p,
            Err(PolicyError::NoHistory) => {
                return Ok(PolicyDecision {
                    level: 0,
                    rationale: Some("no throughput history".into()),
                })
            }
            Err(e) => return Err(e),
        };
        let plan = self.plan(state, predicted);
        Ok(PolicyDecision {
            level: plan.levels.first().copied().unwrap_or(0),
            rationale: Some(format!(
                "predicted {predicted:.4} Mbps, plan {:?} scores {:.4}",
                plan.levels, plan.score
            )),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Draw from the policy distribution.
    Sample,
    /// Most probable level.
    Greedy,
}

/// Actor-network controller.
#[derive(Debug, Clone)]
pub struct RlPolicy {
    actor: ParameterSet,
    mode: SampleMode,
    label: String,
}

impl RlPolicy {
    pub fn new(actor: ParameterSet, mode: SampleMode) -> Result<Self, PolicyError> {
        if actor.role() != nn::Role::Actor {
            return Err(NnError::ShapeMismatch("parameter set is not an actor".into()).into());
        }
        Ok(Self {
            actor,
            mode,
            label: "rl".into(),
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn actor(&self) -> &ParameterSet {
        &self.actor
    }
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final partial sum: take the last non-zero entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl Policy for RlPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn decide(&self, state: &EnvState, rng: &mut dyn RngCore) -> Result<PolicyDecision, PolicyError> {
        let probs = nn::forward_actor(&self.actor, state)?;
        let level = match self.mode {
            SampleMode::Greedy => argmax(&probs),
            SampleMode::Sample => sample_categorical(&probs, rng),
        };
        Ok(PolicyDecision::level(level))
    }
}

/// Textual controller selection: `fixed:<level>`, `bb:<reservoir>,<cushion>`,
/// `mpc:<horizon>,<window>`, `rl:<params-file>`. `bb` and `mpc` alone use defaults.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    Fixed(usize),
    BufferBased { reservoir: f64, cushion: f64 },
    Mpc(MpcConfig),
    Rl(PathBuf),
}

impl FromStr for PolicySpec {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason: &str| PolicyError::Spec {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        let (kind, args) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let pair = |a: &str| -> Result<(String, String), PolicyError> {
            let (x, y) = a.split_once(',').ok_or_else(|| err("expected two comma-separated values"))?;
            Ok((x.trim().to_string(), y.trim().to_string()))
        };
        match (kind, args) {
            ("fixed", Some(a)) => a
                .parse()
                .map(PolicySpec::Fixed)
                .map_err(|_| err("level must be a non-negative integer")),
            ("bb", None) => Ok(PolicySpec::BufferBased {
                reservoir: BufferBasedPolicy::DEFAULT_RESERVOIR,
                cushion: BufferBasedPolicy::DEFAULT_CUSHION,
            }),
            ("bb", Some(a)) => {
                let (r, c) = pair(a)?;
                let reservoir: f64 = r.parse().map_err(|_| err("reservoir must be a number"))?;
                let cushion: f64 = c.parse().map_err(|_| err("cushion must be a number"))?;
                BufferBasedPolicy::new(reservoir, cushion).map_err(|e| err(&e.to_string()))?;
                Ok(PolicySpec::BufferBased { reservoir, cushion })
            }
            ("mpc", None) => Ok(PolicySpec::Mpc(MpcConfig::default())),
            ("mpc", Some(a)) => {
                let (h, w) = pair(a)?;
                let cfg = MpcConfig {
                    horizon: h.parse().map_err(|_| err("horizon must be an integer"))?,
                    window: w.parse().map_err(|_| err("window must be an integer"))?,
                };
                cfg.validate().map_err(|e| err(&e.to_string()))?;
                Ok(PolicySpec::Mpc(cfg))
            }
            ("rl", Some(a)) if !a.is_empty() => Ok(PolicySpec::Rl(PathBuf::from(a))),
            _ => Err(err("expected fixed:<level>, bb:<r>,<c>, mpc:<h>,<w> or rl:<file>")),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Fixed(l) => write!(f, "fixed:{l}"),
            PolicySpec::BufferBased { reservoir, cushion } => write!(f, "bb:{reservoir},{cushion}"),
            PolicySpec::Mpc(c) => write!(f, "mpc:{},{}", c.horizon, c.window),
            PolicySpec::Rl(p) => write!(f, "rl:{}", p.display()),
        }
    }
}

impl PolicySpec {
    /// Instantiates the controller. `rl` specs load the actor from disk and
    /// act greedily.
    pub fn build(
        &self,
        session: &SessionConfig,
        table: &RateAccuracyTable,
    ) -> Result<Box<dyn Policy>, PolicyError> {
        let m = session.level_count();
        Ok(match self {
            PolicySpec::Fixed(level) => {
                if *level >= m {
                    return Err(PolicyError::Invalid(format!(
                        "fixed level {level} outside ladder of {m} levels"
                    )));
                }
                Box::new(FixedPolicy::new(*level))
            }
            PolicySpec::BufferBased { reservoir, cushion } => {
                Box::new(BufferBasedPolicy::new(*reservoir, *cushion)?)
            }
            PolicySpec::Mpc(cfg) => Box::new(MpcPolicy::new(*cfg, session.clone(), table.clone())?),
            PolicySpec::Rl(path) => {
                let actor = nn::load_actor(path)?;
                let expected = nn::Architecture::new(session.history_len, m);
                if actor.architecture() != &expected {
                    return Err(NnError::ShapeMismatch(format!(
                        "actor in {} was built for a different session shape",
                        path.display()
                    ))
                    .into());
                }
                Box::new(RlPolicy::new(actor, SampleMode::Greedy)?.with_label(self.to_string()))
            }
        })
    }
}
