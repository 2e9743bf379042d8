// Train the actor-critic controller on the bundled traces for a few
// hundred episodes, save a checkpoint and evaluate it greedily.

use std::path::Path;

use semabr::metrics::RateAccuracyTable;
use semabr::playback::SessionConfig;
use semabr::rl::{self, Checkpoint, TrainConfig, TrainOptions};
use semabr::trace::{split_corpus, TraceCorpus};

const EPOCHS: usize = 300;

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/traces");
    let corpus = TraceCorpus::load_dir(&dir).expect("bundled traces parse");
    let (train, test) = split_corpus(&corpus, 0.75, 0).unwrap();
    let session = SessionConfig::default();
    let table = RateAccuracyTable::bundled();
    let cfg = TrainConfig {
        epochs: EPOCHS,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };

    let report = rl::train(&cfg, &session, &table, &train, &TrainOptions::default()).unwrap();
    let window = EPOCHS / 10;
    for (i, chunk) in report.reward_curve.chunks(window).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let entropy = report.entropy_curve[i * window..][..chunk.len()].iter().sum::<f64>() / chunk.len() as f64;
        println!("epochs {:>4}-{:<4} mean reward {:>8.3}  entropy {:.3}", i * window + 1, i * window + chunk.len(), mean, entropy);
    }
    println!("trained in {:.1} s", report.wall_time);

    let ckpt = Checkpoint {
        epoch: report.epochs(),
        train: cfg,
        actor: report.actor.clone(),
        critic: report.critic.clone(),
    };
    let path = std::env::temp_dir().join("semabr-example.ckpt");
    ckpt.save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap();
    assert_eq!(restored, ckpt);
    println!("checkpoint written to {}", path.display());

    for log in rl::evaluate(&restored.actor, &test, &session, &table, 0).unwrap() {
        let levels: Vec<usize> = log.records.iter().map(|r| r.level).collect();
        println!("{:<10} mean QoE {:>7.3}  levels {:?}", log.trace, log.mean_qoe, &levels[..12]);
    }
}
