// Evaluate the fixed, buffer-based and MPC controllers on the bundled
// traces and write the comparison report (CDFs, means, gains).

use std::path::Path;

use semabr::metrics::RateAccuracyTable;
use semabr::playback::{run_episode, SessionConfig};
use semabr::policies::PolicySpec;
use semabr::report::summarize;
use semabr::trace::TraceCorpus;

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/traces");
    let corpus = TraceCorpus::load_dir(&dir).expect("bundled traces parse");
    let session = SessionConfig::default();
    let table = RateAccuracyTable::bundled();

    let schemes = ["mpc", "bb", "fixed:0", "fixed:1", "fixed:2", "fixed:3"];
    let mut results = Vec::new();
    for name in schemes {
        let policy = name
            .parse::<PolicySpec>()
            .unwrap()
            .build(&session, &table)
            .unwrap();
        let logs = corpus
            .traces()
            .iter()
            .map(|t| run_episode(policy.as_ref(), t, &session, &table, 0).unwrap())
            .collect();
        results.push((name.to_string(), logs));
    }

    let report = summarize(&results, "data/traces (all)", &[]).unwrap();
    print!("{}", report.summary_text());

    let out = std::env::temp_dir().join("semabr-compare-example");
    report.emit(&out).unwrap();
    println!("\nreport files written to {}", out.display());
}
