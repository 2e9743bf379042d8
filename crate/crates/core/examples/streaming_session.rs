// Play one session chunk by chunk with the buffer-based controller and
// print what the simulator records for each chunk.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semabr::metrics::RateAccuracyTable;
use semabr::playback::{SessionConfig, StreamingEnv};
use semabr::policies::{BufferBasedPolicy, Policy};
use semabr::trace::load_trace;

fn main() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/traces/train_var.log");
    let trace = load_trace(&path).expect("bundled trace parses");
    let config = SessionConfig {
        total_chunks: 16,
        ..SessionConfig::default()
    };
    let table = RateAccuracyTable::bundled();
    let policy = BufferBasedPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut env = StreamingEnv::new(&trace, &config, &table).expect("valid session");
    println!(
        "{:>3} {:>5} {:>9} {:>8} {:>8} {:>6} {:>7}",
        "n", "kbps", "download", "rebuf", "buffer", "miou", "qoe"
    );
    let mut state = env.state();
    while !env.is_done() {
        let level = policy.decide(&state, &mut rng).expect("bb always decides").level;
        let step = env.step(level).expect("trace has bandwidth");
        let r = &step.record;
        println!(
            "{:>3} {:>5.0} {:>8.2}s {:>7.2}s {:>7.2}s {:>6.3} {:>7.3}",
            r.index, r.bitrate_kbps, r.download_time, r.rebuffer, env.buffer(), r.miou, r.qoe
        );
        state = step.state;
    }
    let log = env.into_log();
    println!("\nmean QoE {:.4} over {} chunks, {:.1} s wall", log.mean_qoe, log.records.len(), log.wall_time());
}
