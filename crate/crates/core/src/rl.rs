//! TD actor-critic training.
//!
//! Each epoch plays one episode on a sampled training trace. For every chunk
//! the worker computes the TD error of the critic's action value, steps the
//! critic against it, and steps the actor along `q_n * grad log pi(a_n | s_n)`
//! (plus an optional entropy bonus). Updates are applied online, chunk by
//! chunk.
//!
//! Multiple workers run episodes concurrently. Each starts from a snapshot of
//! the global parameters, trains a private copy online, and then publishes
//! its accumulated change under a lock. A worker whose snapshot is still
//! current publishes its parameters verbatim, so a single worker reproduces
//! sequential online training exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::RateAccuracyTable;
use crate::nn::{
    self, actor_gradients_into, actor_probs, critic_gradient_into, critic_values, Architecture,
    Features,
    GradientSet, NnError, ParameterSet, Role,
};
use crate::playback::{
    fmt_f64, qoe_chunk, run_episode, EnvState, EpisodeLog, PlaybackError, SessionConfig,
    StreamingEnv,
};
use crate::policies::{sample_categorical, RlPolicy, SampleMode};
use crate::trace::TraceCorpus;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite update at epoch {epoch}")]
    NonFiniteUpdate {
        epoch: usize,
        /// Last finite global parameters.
        snapshot: Box<Checkpoint>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Playback(#[from] PlaybackError),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// What multiplies `grad log pi` in the actor step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorSignal {
    /// The critic's value of the taken action, `q_n`.
    ActionValue,
    /// The negated TD error, `-delta_n`.
    Advantage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub discount: f64,
    pub epochs: usize,
    pub workers: usize,
    /// Entropy bonus weight at the first epoch.
    pub entropy_weight: f64,
    /// Entropy bonus weight reached at the last epoch (linear schedule).
    pub entropy_weight_final: f64,
    pub seed: u64,
    /// Write a checkpoint every this many completed epochs; 0 disables.
    pub checkpoint_every: usize,
    pub actor_signal: ActorSignal,
    /// Factor applied to rewards before they enter the TD error.
    pub reward_scale: f64,
    /// Clamp on the TD error magnitude used by both steps; 0 disables.
    pub td_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            discount: 0.99,
            epochs: 20_000,
            workers: 1,
            entropy_weight: 0.1,
            entropy_weight_final: 0.01,
            seed: 0,
            checkpoint_every: 1000,
            actor_signal: ActorSignal::ActionValue,
            reward_scale: 0.01,
            td_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        let fail = |m: &str| Err(RlError::Config(m.to_string()));
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return fail("discount must lie in [0, 1]");
        }
        if self.epochs == 0 || self.workers == 0 {
            return fail("epochs and workers must be at least 1");
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return fail("reward_scale must be positive");
        }
        if !(self.td_clip >= 0.0) {
            return fail("td_clip must be non-negative");
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight_final >= 0.0) {
            return fail("entropy weights must be non-negative");
        }
        Ok(())
    }

    /// Entropy weight used during `epoch` (0-based).
    pub fn entropy_weight_at(&self, epoch: usize) -> f64 {
        let frac = if self.epochs > 1 {
            epoch as f64 / (self.epochs - 1) as f64
        } else {
            0.0
        };
        self.entropy_weight + (self.entropy_weight_final - self.entropy_weight) * frac.min(1.0)
    }
}

/// One environment interaction.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: EnvState,
    pub action: usize,
    pub reward: f64,
    pub next_state: EnvState,
    pub done: bool,
}

/// Per-chunk reward; identical to the chunk QoE.
pub fn reward(
    miou: f64,
    rebuffer: f64,
    bitrate_mbps: f64,
    prev_bitrate_mbps: f64,
    alpha: f64,
    beta: f64,
) -> f64 {
    qoe_chunk(miou, rebuffer, bitrate_mbps, prev_bitrate_mbps, alpha, beta).0
}

/// `q_n - (r_n + gamma * q_next)`, with no bootstrap past the final chunk.
pub fn td_error(q_n: f64, r_n: f64, gamma: f64, q_next: f64, done: bool) -> f64 {
    let bootstrap = if done { 0.0 } else { q_next };
    q_n - (r_n + gamma * bootstrap)
}

fn check_congruent(p: &ParameterSet, g: &GradientSet) -> Result<(), RlError> {
    if !p.congruent(g) {
        return Err(NnError::ShapeMismatch("gradient does not match parameters".into()).into());
    }
    Ok(())
}

fn non_finite(epoch: usize, actor: &ParameterSet, critic: &ParameterSet, cfg: &TrainConfig) -> RlError {
    RlError::NonFiniteUpdate {
        epoch,
        snapshot: Box::new(Checkpoint {
            epoch,
            train: cfg.clone(),
            actor: actor.clone(),
            critic: critic.clone(),
        }),
    }
}

fn critic_step_is_finite(w: &ParameterSet, delta: f64, d_w: &GradientSet, lr: f64) -> bool {
    let scale = lr * delta;
    scale.is_finite() && w.flat().iter().zip(d_w.flat()).all(|(v, g)| (v - scale * g).is_finite())
}

fn actor_step_is_finite(
    theta: &ParameterSet,
    signal: f64,
    d_theta: &GradientSet,
    lr: f64,
    eta: f64,
    entropy_grad: Option<&GradientSet>,
) -> bool {
    let scale = lr * signal;
    let bonus = lr * eta;
    if !(scale.is_finite() && bonus.is_finite()) {
        return false;
    }
    match entropy_grad.filter(|_| eta != 0.0) {
        None => theta
            .flat()
            .iter()
            .zip(d_theta.flat())
            .all(|(v, g)| (v + scale * g).is_finite()),
        Some(e) => theta
            .flat()
            .iter()
            .zip(d_theta.flat())
            .zip(e.flat())
            .all(|((v, g), h)| (v + scale * g + bonus * h).is_finite()),
    }
}

/// In-place critic step `w -= lr * delta * d_w`. Leaves `w` untouched and
/// returns `false` if the result would be non-finite.
pub fn apply_critic_step(
    w: &mut ParameterSet,
    delta: f64,
    d_w: &GradientSet,
    lr: f64,
) -> Result<bool, RlError> {
    check_congruent(w, d_w)?;
    if !critic_step_is_finite(w, delta, d_w, lr) {
        return Ok(false);
    }
    let scale = lr * delta;
    for (v, g) in w.flat_mut().iter_mut().zip(d_w.flat()) {
        *v -= scale * g;
    }
    Ok(true)
}

/// `w - lr * delta * d_w`.
pub fn critic_step(
    w: &ParameterSet,
    delta: f64,
    d_w: &GradientSet,
    lr: f64,
) -> Result<ParameterSet, RlError> {
    let mut out = w.clone();
    if !apply_critic_step(&mut out, delta, d_w, lr)? {
        return Err(non_finite(0, &out, &out, &TrainConfig::default()));
    }
    Ok(out)
}

/// In-place actor step `theta += lr * signal * d_theta + lr * eta * d_entropy`.
pub fn apply_actor_step(
    theta: &mut ParameterSet,
    signal: f64,
    d_theta: &GradientSet,
    lr: f64,
    eta: f64,
    entropy_grad: Option<&GradientSet>,
) -> Result<bool, RlError> {
    check_congruent(theta, d_theta)?;
    if let Some(e) = entropy_grad {
        check_congruent(theta, e)?;
    }
    if !actor_step_is_finite(theta, signal, d_theta, lr, eta, entropy_grad) {
        return Ok(false);
    }
    let scale = lr * signal;
    let bonus = lr * eta;
    match entropy_grad.filter(|_| eta != 0.0) {
        None => {
            for (v, g) in theta.flat_mut().iter_mut().zip(d_theta.flat()) {
                *v += scale * g;
            }
        }
        Some(e) => {
            for ((v, g), h) in theta.flat_mut().iter_mut().zip(d_theta.flat()).zip(e.flat()) {
                *v += scale * g + bonus * h;
            }
        }
    }
    Ok(true)
}

/// `theta + lr * signal * d_theta + lr * eta * entropy_grad`; `eta = 0`
/// gives the plain update.
pub fn actor_step(
    theta: &ParameterSet,
    signal: f64,
    d_theta: &GradientSet,
    lr: f64,
    eta: f64,
    entropy_grad: Option<&GradientSet>,
) -> Result<ParameterSet, RlError> {
    let mut out = theta.clone();
    if !apply_actor_step(&mut out, signal, d_theta, lr, eta, entropy_grad)? {
        return Err(non_finite(0, &out, &out, &TrainConfig::default()));
    }
    Ok(out)
}

/// `V(s) = sum_a pi(a | s) q(s, a)`.
pub fn state_value(theta: &ParameterSet, w: &ParameterSet, s: &EnvState) -> Result<f64, RlError> {
    let x = s.features();
    let probs = actor_probs(theta, &x)?;
    let q = critic_values(w, &x)?;
    if probs.len() != q.len() {
        return Err(NnError::ShapeMismatch("actor and critic disagree on level count".into()).into());
    }
    Ok(probs.iter().zip(&q).map(|(p, v)| p * v).sum())
}

/// Parameters plus training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Epochs completed.
    pub epoch: usize,
    pub train: TrainConfig,
    pub actor: ParameterSet,
    pub critic: ParameterSet,
}

// "SMBRCKP1" | u64 LE header length | JSON header | actor container | critic container
const CKPT_MAGIC: &[u8; 8] = b"SMBRCKP1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    epoch: usize,
    train: TrainConfig,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            version: 1,
            epoch: self.epoch,
            train: self.train.clone(),
        })
        .expect("header serializes");
        let mut out = CKPT_MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.actor.to_bytes());
        out.extend_from_slice(&self.critic.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RlError> {
        let bad = |m: &str| RlError::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| RlError::Format(e.to_string()))?;
        if header.version != 1 {
            return Err(bad("unsupported version"));
        }
        let rest = &bytes[16 + hlen..];
        let (actor, used) = ParameterSet::from_bytes_prefix(rest)?;
        let critic = ParameterSet::from_bytes(&rest[used..])?;
        if actor.role() != Role::Actor || critic.role() != Role::Critic {
            return Err(bad("role mismatch"));
        }
        if actor.architecture() != critic.architecture() {
            return Err(bad("actor and critic architectures differ"));
        }
        Ok(Self {
            epoch: header.epoch,
            train: header.train,
            actor,
            critic,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), RlError> {
        fs::write(path, self.to_bytes()).map_err(|source| RlError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, RlError> {
        let bytes = fs::read(path).map_err(|source| RlError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    /// Mean per-chunk reward of each epoch's episode.
    pub reward_curve: Vec<f64>,
    /// Mean policy entropy (nats) over each epoch's visited states.
    pub entropy_curve: Vec<f64>,
    /// Seconds since training start when each epoch finished.
    pub epoch_wall: Vec<f64>,
    pub actor: ParameterSet,
    pub critic: ParameterSet,
    pub wall_time: f64,
}

pub const TRAINING_LOG_HEADER: &str = "epoch,mean_reward,mean_entropy,wall_s";

impl TrainingReport {
    pub fn epochs(&self) -> usize {
        self.reward_curve.len()
    }

    /// `epoch,mean_reward,mean_entropy`; deterministic for a single worker.
    pub fn reward_curve_csv(&self) -> String {
        let mut out = String::from("epoch,mean_reward,mean_entropy\n");
        for (i, (r, h)) in self.reward_curve.iter().zip(&self.entropy_curve).enumerate() {
            let _ = writeln!(out, "{},{},{}", i + 1, fmt_f64(*r), fmt_f64(*h));
        }
        out
    }

    /// Reward-curve rows plus wall-clock seconds at the end of each epoch.
    pub fn training_log_csv(&self) -> String {
        let mut out = String::from(TRAINING_LOG_HEADER);
        out.push('\n');
        for (i, (r, h)) in self.reward_curve.iter().zip(&self.entropy_curve).enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{:.3}",
                i + 1,
                fmt_f64(*r),
                fmt_f64(*h),
                self.epoch_wall[i]
            );
        }
        out
    }
}

/// Optional training side effects.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for periodic `epoch-NNNNNN.ckpt` files.
    pub checkpoint_dir: Option<PathBuf>,
}

struct EpisodeStats {
    mean_reward: f64,
    mean_entropy: f64,
}

/// Per-episode RNG, derived from the root seed and the epoch number so runs
/// do not depend on worker scheduling for their random streams.
fn episode_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Everything computed for one online update, for inspection.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub q_n: f64,
    /// Bootstrap value `V(s_{n+1})`; 0 after the final chunk.
    pub q_next: f64,
    pub delta: f64,
    /// Multiplier of `d_theta` in the actor step.
    pub signal: f64,
    pub d_theta: GradientSet,
    pub d_w: GradientSet,
    pub entropy_grad: Option<GradientSet>,
}

/// Reusable gradient storage for [`online_step`].
struct StepBuffers {
    d_theta: GradientSet,
    d_w: GradientSet,
    entropy: GradientSet,
}

impl StepBuffers {
    fn new(actor: &ParameterSet, critic: &ParameterSet) -> Self {
        Self {
            d_theta: GradientSet::zeros_like(actor),
            d_w: GradientSet::zeros_like(critic),
            entropy: GradientSet::zeros_like(actor),
        }
    }
}

struct StepScalars {
    q_n: f64,
    q_next: f64,
    delta: f64,
    signal: f64,
}

/// One online actor-critic update for the transition `(x, action, reward,
/// x_next)`; `x_next` is `None` after the final chunk. Returns `None` (and
/// leaves both parameter sets unchanged) if either step would be non-finite.
#[allow(clippy::too_many_arguments)]
pub fn online_step(
    cfg: &TrainConfig,
    eta: f64,
    actor: &mut ParameterSet,
    critic: &mut ParameterSet,
    x: &Features,
    action: usize,
    reward: f64,
    x_next: Option<&Features>,
) -> Result<Option<StepTrace>, RlError> {
    let mut buf = StepBuffers::new(actor, critic);
    let Some(sc) = step_in_place(cfg, eta, actor, critic, x, action, reward, x_next, &mut buf)?
    else {
        return Ok(None);
    };
    Ok(Some(StepTrace {
        q_n: sc.q_n,
        q_next: sc.q_next,
        delta: sc.delta,
        signal: sc.signal,
        d_theta: buf.d_theta,
        d_w: buf.d_w,
        entropy_grad: (eta > 0.0).then_some(buf.entropy),
    }))
}

#[allow(clippy::too_many_arguments)]
fn step_in_place(
    cfg: &TrainConfig,
    eta: f64,
    actor: &mut ParameterSet,
    critic: &mut ParameterSet,
    x: &Features,
    action: usize,
    reward: f64,
    x_next: Option<&Features>,
    buf: &mut StepBuffers,
) -> Result<Option<StepScalars>, RlError> {
    let q_all = critic_gradient_into(critic, x, action, &mut buf.d_w)?;
    let q_n = q_all[action];
    let q_next = match x_next {
        None => 0.0,
        Some(xn) => {
            let p = actor_probs(actor, xn)?;
            let q = critic_values(critic, xn)?;
            p.iter().zip(&q).map(|(a, b)| a * b).sum()
        }
    };
    let delta = clipped_td(cfg, q_n, reward, q_next, x_next.is_none());
    let with_entropy = eta > 0.0;
    actor_gradients_into(
        actor,
        x,
        action,
        &mut buf.d_theta,
        with_entropy.then_some(&mut buf.entropy),
    )?;
    let entropy = with_entropy.then_some(&buf.entropy);
    let signal = match cfg.actor_signal {
        ActorSignal::ActionValue => q_n,
        ActorSignal::Advantage => -delta,
    };
    if !critic_step_is_finite(critic, delta, &buf.d_w, cfg.critic_lr)
        || !actor_step_is_finite(actor, signal, &buf.d_theta, cfg.actor_lr, eta, entropy)
    {
        return Ok(None);
    }
    apply_critic_step(critic, delta, &buf.d_w, cfg.critic_lr)?;
    apply_actor_step(actor, signal, &buf.d_theta, cfg.actor_lr, eta, entropy)?;
    Ok(Some(StepScalars {
        q_n,
        q_next,
        delta,
        signal,
    }))
}

/// The update of [`online_step`] applied without materializing gradients.
/// `actor_pass` is the actor's forward pass on `x` that produced `probs`.
/// Finiteness is not checked here; the caller checks once per episode.
#[allow(clippy::too_many_arguments)]
fn fused_step(
    cfg: &TrainConfig,
    eta: f64,
    actor: &mut ParameterSet,
    critic: &mut ParameterSet,
    x: &Features,
    actor_pass: &nn::ForwardPass,
    probs: &[f64],
    action: usize,
    reward: f64,
    x_next: Option<&Features>,
) -> Result<(), RlError> {
    let critic_pass = nn::forward_pass(critic, x)?;
    let q_n = critic_pass.outputs()[action];
    let q_next = match x_next {
        None => 0.0,
        Some(xn) => {
            let p = actor_probs(actor, xn)?;
            let q = critic_values(critic, xn)?;
            p.iter().zip(&q).map(|(a, b)| a * b).sum()
        }
    };
    let delta = clipped_td(cfg, q_n, reward, q_next, x_next.is_none());
    let signal = match cfg.actor_signal {
        ActorSignal::ActionValue => q_n,
        ActorSignal::Advantage => -delta,
    };
    let mut onehot = vec![0.0; probs.len()];
    onehot[action] = 1.0;
    nn::apply_gradient_step(critic, x, &critic_pass, &[(-(cfg.critic_lr * delta), &onehot)])?;
    let dlogp = nn::log_policy_signal(probs, action);
    if eta > 0.0 {
        let dh = nn::entropy_signal(probs);
        nn::apply_gradient_step(
            actor,
            x,
            actor_pass,
            &[(cfg.actor_lr * signal, &dlogp), (cfg.actor_lr * eta, &dh)],
        )?;
    } else {
        nn::apply_gradient_step(actor, x, actor_pass, &[(cfg.actor_lr * signal, &dlogp)])?;
    }
    Ok(())
}

fn clipped_td(cfg: &TrainConfig, q_n: f64, reward: f64, q_next: f64, done: bool) -> f64 {
    let delta = td_error(q_n, reward * cfg.reward_scale, cfg.discount, q_next, done);
    if cfg.td_clip > 0.0 {
        delta.clamp(-cfg.td_clip, cfg.td_clip)
    } else {
        delta
    }
}

/// Runs one online episode, updating `actor` and `critic` in place.
/// Returns `None` if the parameters stopped being finite.
fn train_episode(
    cfg: &TrainConfig,
    epoch: usize,
    session: &SessionConfig,
    table: &RateAccuracyTable,
    corpus: &TraceCorpus,
    actor: &mut ParameterSet,
    critic: &mut ParameterSet,
) -> Result<Option<EpisodeStats>, RlError> {
    let mut rng = episode_rng(cfg.seed, epoch);
    let trace = &corpus.traces()[rng.random_range(0..corpus.len())];
    let mut env = StreamingEnv::new(trace, session, table)?;
    let eta = cfg.entropy_weight_at(epoch);

    let mut x = env.state().features();
    let (mut reward_sum, mut entropy_sum, mut steps) = (0.0, 0.0, 0usize);
    loop {
        let pass = match nn::forward_pass(actor, &x) {
            Ok(p) => p,
            Err(NnError::NonFiniteActivation(_)) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let probs = nn::softmax(pass.outputs());
        entropy_sum += nn::entropy_of(&probs);
        let action = sample_categorical(&probs, &mut rng);
        let outcome = env.step(action)?;
        let r = outcome.record.qoe;
        let x_next = outcome.state.features();
        let next = (!outcome.done).then_some(&x_next);
        match fused_step(cfg, eta, actor, critic, &x, &pass, &probs, action, r, next) {
            Ok(()) => {}
            Err(RlError::Nn(NnError::NonFiniteActivation(_))) => return Ok(None),
            Err(e) => return Err(e),
        }
        reward_sum += r;
        steps += 1;
        if outcome.done {
            break;
        }
        x = x_next;
    }
    if !(actor.is_finite() && critic.is_finite()) {
        return Ok(None);
    }
    Ok(Some(EpisodeStats {
        mean_reward: reward_sum / steps as f64,
        mean_entropy: entropy_sum / steps as f64,
    }))
}

struct Global {
    actor: ParameterSet,
    critic: ParameterSet,
    /// Incremented on every publish.
    version: u64,
    next_epoch: usize,
    completed: usize,
    rewards: Vec<f64>,
    entropies: Vec<f64>,
    wall: Vec<f64>,
    failure: Option<RlError>,
}

fn add_delta(global: &mut ParameterSet, local: &ParameterSet, base: &ParameterSet) {
    for ((g, l), b) in global
        .flat_mut()
        .iter_mut()
        .zip(local.flat())
        .zip(base.flat())
    {
        *g += l - b;
    }
}

/// Trains actor and critic from seeded initial parameters.
pub fn train(
    cfg: &TrainConfig,
    session: &SessionConfig,
    table: &RateAccuracyTable,
    corpus: &TraceCorpus,
    opts: &TrainOptions,
) -> Result<TrainingReport, RlError> {
    let arch = Architecture::new(session.history_len, session.level_count());
    let actor = nn::init_params(cfg.seed, arch, Role::Actor);
    let critic = nn::init_params(cfg.seed.wrapping_add(1), arch, Role::Critic);
    train_from(cfg, session, table, corpus, opts, actor, critic)
}

/// Trains starting from the given parameters.
pub fn train_from(
    cfg: &TrainConfig,
    session: &SessionConfig,
    table: &RateAccuracyTable,
    corpus: &TraceCorpus,
    opts: &TrainOptions,
    actor: ParameterSet,
    critic: ParameterSet,
) -> Result<TrainingReport, RlError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(RlError::EmptyCorpus);
    }
    session.validate()?;
    table.covers(&session.codec, &session.ladder).map_err(PlaybackError::from)?;
    if let Some(dir) = &opts.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|source| RlError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    let start = Instant::now();
    let global = Mutex::new(Global {
        actor,
        critic,
        version: 0,
        next_epoch: 0,
        completed: 0,
        rewards: vec![f64::NAN; cfg.epochs],
        entropies: vec![f64::NAN; cfg.epochs],
        wall: vec![0.0; cfg.epochs],
        failure: None,
    });

    let worker = || {
        loop {
            let (epoch, version, base_actor, base_critic) = {
                let mut g = global.lock().unwrap();
                if g.failure.is_some() || g.next_epoch >= cfg.epochs {
                    return;
                }
                let e = g.next_epoch;
                g.next_epoch += 1;
                (e, g.version, g.actor.clone(), g.critic.clone())
            };
            let mut actor = base_actor.clone();
            let mut critic = base_critic.clone();
            let result = train_episode(cfg, epoch, session, table, corpus, &mut actor, &mut critic);

            let mut g = global.lock().unwrap();
            let stats = match result {
                Ok(Some(stats)) => stats,
                Ok(None) => {
                    let err = non_finite(epoch, &g.actor, &g.critic, cfg);
                    g.failure.get_or_insert(err);
                    return;
                }
                Err(e) => {
                    g.failure.get_or_insert(e);
                    return;
                }
            };
            if g.version == version {
                g.actor = actor;
                g.critic = critic;
            } else {
                let mut next_actor = g.actor.clone();
                let mut next_critic = g.critic.clone();
                add_delta(&mut next_actor, &actor, &base_actor);
                add_delta(&mut next_critic, &critic, &base_critic);
                if !(next_actor.is_finite() && next_critic.is_finite()) {
                    let err = non_finite(epoch, &g.actor, &g.critic, cfg);
                    g.failure.get_or_insert(err);
                    return;
                }
                g.actor = next_actor;
                g.critic = next_critic;
            }
            g.version += 1;
            g.rewards[epoch] = stats.mean_reward;
            g.entropies[epoch] = stats.mean_entropy;
            g.wall[epoch] = start.elapsed().as_secs_f64();
            g.completed += 1;
            if let Some(dir) = &opts.checkpoint_dir {
                if cfg.checkpoint_every > 0 && g.completed.is_multiple_of(cfg.checkpoint_every) {
                    let ckpt = Checkpoint {
                        epoch: g.completed,
                        train: cfg.clone(),
                        actor: g.actor.clone(),
                        critic: g.critic.clone(),
                    };
                    let path = dir.join(format!("epoch-{:06}.ckpt", g.completed));
                    if let Err(e) = ckpt.save(&path) {
                        g.failure.get_or_insert(e);
                        return;
                    }
                }
            }
        }
    };

    if cfg.workers == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..cfg.workers {
                s.spawn(worker);
            }
        });
    }

    let g = global.into_inner().unwrap();
    if let Some(err) = g.failure {
        return Err(err);
    }
    Ok(TrainingReport {
        reward_curve: g.rewards,
        entropy_curve: g.entropies,
        epoch_wall: g.wall,
        actor: g.actor,
        critic: g.critic,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Greedy evaluation of `actor` on every trace of `corpus`, in corpus order.
pub fn evaluate(
    actor: &ParameterSet,
    corpus: &TraceCorpus,
    session: &SessionConfig,
    table: &RateAccuracyTable,
    seed: u64,
) -> Result<Vec<EpisodeLog>, RlError> {
    if corpus.is_empty() {
        return Err(RlError::EmptyCorpus);
    }
    let policy = RlPolicy::new(actor.clone(), SampleMode::Greedy).map_err(PlaybackError::from)?;
    corpus
        .traces()
        .iter()
        .map(|t| run_episode(&policy, t, session, table, seed).map_err(RlError::from))
        .collect()
}
