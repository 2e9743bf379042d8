// Load the bundled trace directory, print per-trace statistics and a seeded
// 75/25 train/test split.

use std::path::Path;

use semabr::trace::{split_corpus, TraceCorpus};

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/traces");
    let corpus = TraceCorpus::load_dir(&dir).expect("bundled traces parse");

    println!("{:<10} {:>9} {:>8} {:>9} {:>9} {:>9}", "trace", "duration", "samples", "mean", "min", "max");
    for t in corpus.traces() {
        let (lo, hi) = t.bandwidth_range();
        println!(
            "{:<10} {:>8.0}s {:>8} {:>9.3} {:>9.3} {:>9.3}",
            t.name(),
            t.duration(),
            t.samples().len(),
            t.mean_bandwidth(),
            lo,
            hi
        );
    }

    // the trace loops: lookups past the end wrap around
    let t = &corpus.traces()[0];
    assert_eq!(t.bandwidth_at(1.5), t.bandwidth_at(1.5 + t.duration()));

    let (train, test) = split_corpus(&corpus, 0.75, 42).expect("non-empty corpus");
    println!("\ntrain ({}): {}", train.len(), train.names().join(" "));
    println!("test  ({}): {}", test.len(), test.names().join(" "));
}
