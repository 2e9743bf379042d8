// Model-predictive control: the plan chosen from a harmonic-mean throughput
// forecast next to the plan chosen with perfect knowledge of the trace.

use semabr::metrics::RateAccuracyTable;
use semabr::playback::{SessionConfig, StreamingEnv};
use semabr::policies::{MpcConfig, MpcPolicy};
use semabr::trace::BandwidthTrace;

fn main() {
    // bandwidth collapses after 20 s
    let trace = BandwidthTrace::from_pairs("drop", &[(0.0, 2.0), (20.0, 0.3), (60.0, 2.0)]).unwrap();
    let config = SessionConfig {
        total_chunks: 12,
        ..SessionConfig::default()
    };
    let table = RateAccuracyTable::bundled();
    let mpc = MpcPolicy::new(MpcConfig::default(), config.clone(), table.clone()).unwrap();
    let mut env = StreamingEnv::new(&trace, &config, &table).unwrap();

    while !env.is_done() {
        let state = env.state();
        // no forecast before the first download completes
        let forecast = mpc.predict(&state).ok();
        let oracle = mpc.plan_with_foresight(&state, &trace, env.clock()).unwrap();
        let level = match forecast {
            Some(mbps) => {
                let plan = mpc.plan(&state, mbps);
                println!(
                    "t={:>5.1}s forecast {mbps:.3} Mbps plan {:?} ({:.2}); foresight {:?} ({:.2})",
                    env.clock(),
                    plan.levels,
                    plan.score,
                    oracle.levels,
                    oracle.score
                );
                plan.levels[0]
            }
            None => {
                println!("t={:>5.1}s no throughput yet, lowest level", env.clock());
                0
            }
        };
        env.step(level).unwrap();
    }
    let log = env.into_log();
    println!("mean QoE {:.4}", log.mean_qoe);
}
