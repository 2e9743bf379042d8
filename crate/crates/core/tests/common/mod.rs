// Helpers shared by the integration and acceptance tests: synthetic corpora,
// brute-force oracles and a finite-difference gradient probe.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semabr::metrics::{BitrateLadder, RateAccuracyTable};
use semabr::nn::{self, Features, ParameterSet};
use semabr::playback::{EpisodeLog, SessionConfig, StreamingEnv};
use semabr::trace::{BandwidthTrace, TraceCorpus};

/// 30 traces whose long-run means grow geometrically from 0.1 to 6 Mbps.
/// Each trace switches regime with probability 0.1 per second and carries
/// +-10 % sample noise; 1 s samples over 400 s.
pub fn synthetic_corpus(seed: u64) -> TraceCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traces = (0..30)
        .map(|i| {
            let mean = 0.1 * 60f64.powf(i as f64 / 29.0);
            let mut level = mean;
            let pairs: Vec<(f64, f64)> = (0..400)
                .map(|t| {
                    if rng.random::<f64>() < 0.1 {
                        let swing = (rng.random::<f64>() * 2.0 - 1.0) * 1.2;
                        level = (mean * swing.exp()).clamp(0.1, 6.0);
                    }
                    let bw = level * (1.0 + 0.2 * (rng.random::<f64>() - 0.5));
                    (t as f64, bw.clamp(0.1, 6.0))
                })
                .collect();
            BandwidthTrace::from_pairs(format!("syn{i:02}"), &pairs).unwrap()
        })
        .collect();
    TraceCorpus::new("synthetic", traces).unwrap()
}

/// Environment whose optimum is known: MIoU does not depend on bitrate and
/// the links sit just above the lowest level, so any higher level only adds
/// stalls and switching cost. Always choosing level 0 is optimal.
pub fn known_optimum() -> (RateAccuracyTable, TraceCorpus) {
    let session = SessionConfig::default();
    let points: Vec<(f64, f64)> = session.ladder.levels().iter().map(|&b| (b, 0.5)).collect();
    let table = RateAccuracyTable::single(&session.codec, &points).unwrap();
    let traces = (0..4)
        .map(|i| {
            let bw = 0.18 + 0.01 * i as f64;
            BandwidthTrace::from_pairs(format!("flat{i}"), &[(0.0, bw), (100.0, 0.2)]).unwrap()
        })
        .collect();
    (table, TraceCorpus::new("known-optimum", traces).unwrap())
}

pub fn mean_qoe(logs: &[EpisodeLog]) -> f64 {
    let (sum, n) = logs
        .iter()
        .flat_map(|l| &l.records)
        .fold((0.0, 0usize), |(s, n), r| (s + r.qoe, n + 1));
    sum / n as f64
}

/// Per-class IoU averaged over classes present in truth or prediction,
/// computed straight from the label grids.
pub fn brute_force_miou(classes: usize, truth: &[usize], predicted: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&t, &p) in truth.iter().zip(predicted) {
            if t == c && p == c {
                inter += 1;
            }
            if t == c || p == c {
                union += 1;
            }
        }
        if union > 0 {
            total += inter as f64 / union as f64;
            present += 1;
        }
    }
    total / present as f64
}

/// Download time by stepping the clock in 1 ms increments. Each step drains
/// at the bandwidth sampled at its midpoint.
pub fn stepped_download(trace: &BandwidthTrace, start: f64, size_mb: f64, rtt: f64) -> f64 {
    const DT: f64 = 1e-3;
    let begin = start + rtt;
    let mut remaining = size_mb;
    let mut k = 0u64;
    while remaining > 0.0 {
        let t = begin + k as f64 * DT;
        let bw = trace.bandwidth_at(t + DT / 2.0);
        let drained = bw * DT;
        if drained >= remaining {
            return t + remaining / bw - start;
        }
        remaining -= drained;
        k += 1;
    }
    rtt
}

/// Best total QoE over every level sequence of a whole session, each
/// sequence played out in a fresh environment.
pub fn exhaustive_best(trace: &BandwidthTrace, session: &SessionConfig, table: &RateAccuracyTable) -> f64 {
    let m = session.level_count();
    let n = session.total_chunks;
    let mut best = f64::NEG_INFINITY;
    for code in 0..m.pow(n as u32) {
        let mut env = StreamingEnv::new(trace, session, table).unwrap();
        let mut rest = code;
        let mut score = 0.0;
        for _ in 0..n {
            score += env.step(rest % m).unwrap().record.qoe;
            rest /= m;
        }
        best = best.max(score);
    }
    best
}

/// Random session of `m` levels and `n` chunks with a random
/// nondecreasing rate-accuracy curve.
pub fn tiny_session(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (SessionConfig, RateAccuracyTable) {
    let mut levels = Vec::with_capacity(m);
    let mut b = rng.random_range(100.0..400.0);
    for _ in 0..m {
        levels.push(f64::round(b));
        b *= rng.random_range(1.5..2.5);
    }
    let mut mious: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..0.9)).collect();
    mious.sort_by(f64::total_cmp);
    let points: Vec<(f64, f64)> = levels.iter().copied().zip(mious).collect();
    let session = SessionConfig {
        ladder: BitrateLadder::new(levels).unwrap(),
        chunk_duration: rng.random_range(1.0..4.0),
        buffer_capacity: rng.random_range(4.0..20.0),
        rtt: rng.random_range(0.0..0.1),
        total_chunks: n,
        ..SessionConfig::default()
    };
    let table = RateAccuracyTable::single(&session.codec, &points).unwrap();
    (session, table)
}

/// Piecewise-constant trace with `segments` random pieces, timestamps on
/// a 1 ms grid.
pub fn random_trace(rng: &mut ChaCha8Rng, segments: usize, name: &str) -> BandwidthTrace {
    let mut t_ms = 0u64;
    let mut pairs = Vec::with_capacity(segments + 1);
    for _ in 0..segments {
        pairs.push((t_ms as f64 / 1000.0, rng.random_range(0.2..5.0)));
        t_ms += rng.random_range(100..3000);
    }
    pairs.push((t_ms as f64 / 1000.0, rng.random_range(0.2..5.0)));
    BandwidthTrace::from_pairs(name, &pairs).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, k: usize, m: usize) -> Features {
    Features {
        throughput: (0..k).map(|_| rng.random_range(0.0..6.0)).collect(),
        download: (0..k).map(|_| rng.random_range(0.0..2.0)).collect(),
        sizes: (0..m).map(|l| 0.64 * 2f64.powi(l as i32)).collect(),
        scalars: [rng.random_range(0.0..6.0), rng.random::<f64>(), rng.random::<f64>()],
    }
}

/// Central difference of `f` along coordinate `i`.
pub fn central_difference(p: &ParameterSet, i: usize, eps: f64, f: &dyn Fn(&ParameterSet) -> f64) -> f64 {
    let mut plus = p.clone();
    plus.flat_mut()[i] += eps;
    let mut minus = p.clone();
    minus.flat_mut()[i] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

/// Relative error with a small absolute floor so near-zero components do
/// not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference that steps around ReLU kinks. Starting at 1e-5 the
/// step shrinks tenfold until two consecutive estimates agree to 2e-5
/// relative, well inside the tested tolerance, plus 1e-9 absolute for
/// roundoff at small steps. The larger step of the agreeing pair is used.
/// On smooth stretches that is the 1e-5 step itself. The flag reports whether a smaller step was needed.
pub fn kink_aware_difference(p: &ParameterSet, i: usize, f: &dyn Fn(&ParameterSet) -> f64) -> (f64, bool) {
    const STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-8];
    let mut prev = central_difference(p, i, STEPS[0], f);
    for (k, &eps) in STEPS.iter().enumerate().skip(1) {
        let next = central_difference(p, i, eps, f);
        if (prev - next).abs() <= 2e-5 * prev.abs().max(next.abs()) + 1e-9 {
            return (prev, k > 1);
        }
        prev = next;
    }
    (prev, true)
}

/// Gradient agreement over a set of coordinates.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientCheck {
    /// Worst relative error of the log-policy gradient.
    pub actor: f64,
    /// Worst relative error of the q gradient.
    pub critic: f64,
    /// Coordinates that needed the smaller step.
    pub kinks: usize,
}

/// Compares the analytic log-policy and q gradients with central
/// differences over the given coordinates.
pub fn gradient_errors(
    theta: &ParameterSet,
    w: &ParameterSet,
    x: &Features,
    action: usize,
    coords_actor: &[usize],
    coords_critic: &[usize],
) -> GradientCheck {
    let mut out = GradientCheck::default();
    let g_actor = nn::actor_gradients(theta, x, action, false).unwrap().log_policy;
    let log_pi = |p: &ParameterSet| nn::actor_probs(p, x).unwrap()[action].ln();
    for &i in coords_actor {
        let (numeric, kink) = kink_aware_difference(theta, i, &log_pi);
        out.actor = out.actor.max(relative_error(g_actor.flat()[i], numeric));
        out.kinks += kink as usize;
    }
    let (_, g_critic) = nn::critic_gradient(w, x, action).unwrap();
    let q = |p: &ParameterSet| nn::critic_values(p, x).unwrap()[action];
    for &i in coords_critic {
        let (numeric, kink) = kink_aware_difference(w, i, &q);
        out.critic = out.critic.max(relative_error(g_critic.flat()[i], numeric));
        out.kinks += kink as usize;
    }
    out
}
