// Module results against independent reference computations.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semabr::metrics::RateAccuracyTable;
use semabr::nn::{self, Architecture, Layer, Role};
use semabr::playback::{download_chunk, run_episode, SessionConfig, StreamingEnv};
use semabr::policies::{FixedPolicy, MpcConfig, MpcPolicy};
use semabr::trace::{BandwidthTrace, TraceCorpus};

#[test]
fn download_matches_stepping_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..40 {
        let segments = rng.random_range(1..8);
        let trace = common::random_trace(&mut rng, segments, &format!("r{i}"));
        let start = rng.random_range(0..20_000) as f64 / 1000.0;
        let size = rng.random_range(0.0..6.0);
        let dl = download_chunk(&trace, start, size, 0.08).unwrap();
        let oracle = common::stepped_download(&trace, start, size, 0.08);
        assert!(
            (dl.download_time - oracle).abs() < 2e-3,
            "{i}: {} vs {oracle}",
            dl.download_time
        );
    }
}

#[test]
fn download_on_constant_link_is_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let bw = rng.random_range(0.05..20.0);
        let trace = BandwidthTrace::from_pairs("c", &[(0.0, bw), (rng.random_range(0.5..10.0), bw)]).unwrap();
        let size = rng.random_range(0.0..10.0);
        let start = rng.random_range(0.0..100.0);
        let dl = download_chunk(&trace, start, size, 0.08).unwrap();
        assert!((dl.download_time - (size / bw + 0.08)).abs() < 1e-9);
    }
}

#[test]
fn mpc_with_foresight_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..20 {
        let m = rng.random_range(2..=3);
        let n = rng.random_range(1..=5);
        let (session, table) = common::tiny_session(&mut rng, m, n);
        let trace = common::random_trace(&mut rng, 5, &format!("r{i}"));
        let mpc = MpcPolicy::new(MpcConfig { horizon: n, window: 5 }, session.clone(), table.clone()).unwrap();
        let env = StreamingEnv::new(&trace, &session, &table).unwrap();
        let plan = mpc.plan_with_foresight(&env.state(), &trace, 0.0).unwrap();
        assert_eq!(plan.levels.len(), n);
        assert_eq!(plan.score, common::exhaustive_best(&trace, &session, &table), "instance {i}");
    }
}

#[test]
fn mpc_keeps_top_level_on_abundant_link() {
    let session = SessionConfig { total_chunks: 6, ..SessionConfig::default() };
    let table = RateAccuracyTable::bundled();
    let trace = BandwidthTrace::from_pairs("fast", &[(0.0, 100.0), (10.0, 100.0)]).unwrap();
    let mut env = StreamingEnv::new(&trace, &session, &table).unwrap();
    env.step(3).unwrap();
    let mpc = MpcPolicy::new(MpcConfig::default(), session.clone(), table.clone()).unwrap();
    let plan = mpc.plan(&env.state(), 1000.0);
    assert!(plan.levels.iter().all(|&l| l == 3), "{:?}", plan.levels);
}

#[test]
fn lowest_level_never_stalls_on_fast_link() {
    let session = SessionConfig::default();
    let table = RateAccuracyTable::bundled();
    let trace = BandwidthTrace::from_pairs("c10", &[(0.0, 10.0), (60.0, 10.0)]).unwrap();
    let log = run_episode(&FixedPolicy::new(0), &trace, &session, &table, 0).unwrap();
    assert!(log.records.iter().all(|r| r.rebuffer == 0.0));
    let again = run_episode(&FixedPolicy::new(0), &trace, &session, &table, 0).unwrap();
    assert_eq!(log.to_csv(), again.to_csv());
}

#[test]
fn gradients_match_finite_differences() {
    let arch = Architecture {
        history_len: 4,
        level_count: 3,
        filters: 3,
        kernel: 3,
        scalar_units: 4,
        hidden_units: 6,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let all: Vec<usize> = (0..arch.param_count()).collect();
    for draw in 0..10 {
        let theta = nn::init_params(rng.random(), arch, Role::Actor);
        let w = nn::init_params(rng.random(), arch, Role::Critic);
        let x = common::random_features(&mut rng, arch.history_len, arch.level_count);
        let a = rng.random_range(0..arch.level_count);
        let g = common::gradient_errors(&theta, &w, &x, a, &all, &all);
        assert!(g.actor < 1e-4 && g.critic < 1e-4, "draw {draw}: {g:?}");
    }
}

#[test]
fn full_size_gradients_match_on_sampled_coordinates() {
    let arch = Architecture::new(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let theta = nn::init_params(1, arch, Role::Actor);
    let w = nn::init_params(2, arch, Role::Critic);
    let coords: Vec<usize> = Layer::ALL
        .iter()
        .flat_map(|&l| {
            let r = theta.layer_range(l);
            let mut rng = ChaCha8Rng::seed_from_u64(r.start as u64);
            (0..3).map(move |_| rng.random_range(r.clone())).collect::<Vec<_>>()
        })
        .collect();
    let x = common::random_features(&mut rng, 8, 4);
    let g = common::gradient_errors(&theta, &w, &x, 2, &coords, &coords);
    assert!(g.actor < 1e-4 && g.critic < 1e-4, "{g:?}");
}

#[test]
fn score_function_sums_to_zero() {
    let arch = Architecture::new(8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = nn::init_params(3, arch, Role::Actor);
    let x = common::random_features(&mut rng, 8, 4);
    let mut total = vec![0.0; theta.len()];
    for a in 0..4 {
        let g = nn::actor_gradients(&theta, &x, a, false).unwrap();
        for (t, v) in total.iter_mut().zip(g.log_policy.flat()) {
            *t += g.probs[a] * v;
        }
    }
    let worst = total.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-8, "{worst:e}");
}

#[test]
fn trained_policy_evaluation_is_deterministic() {
    let (table, corpus) = common::known_optimum();
    let session = SessionConfig::default();
    let actor = nn::init_params(8, Architecture::new(8, 4), Role::Actor);
    let a = semabr::rl::evaluate(&actor, &corpus, &session, &table, 1).unwrap();
    let b = semabr::rl::evaluate(&actor, &corpus, &session, &table, 1).unwrap();
    assert_eq!(a, b);
    let fast = TraceCorpus::new(
        "fast",
        vec![BandwidthTrace::from_pairs("inf", &[(0.0, 1e6), (1.0, 1e6)]).unwrap()],
    )
    .unwrap();
    let logs = semabr::rl::evaluate(&actor, &fast, &session, &table, 1).unwrap();
    assert!(logs[0].records.iter().all(|r| r.rebuffer == 0.0));
}
