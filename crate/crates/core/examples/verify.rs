//! Run the self-verification suite: gradient checks, routing symmetries,
//! metric oracles and schedule checks.
//!
//! `cargo run --release --example verify -- [quick|full]`

use pimms::verify::{run, summary, Level};

fn main() {
    let level = std::env::args().nth(1).and_then(|s| Level::parse(&s)).unwrap_or(Level::Quick);
    let results = run(level, &mut |r, secs| {
        println!("{} {:<34} {:>6.2}s  {}", if r.passed { "ok  " } else { "FAIL" }, r.name, secs, r.detail);
    });
    let counts = summary(&results);
    println!(
        "{} passed, {} failed",
        counts.get(&true).copied().unwrap_or(0),
        counts.get(&false).copied().unwrap_or(0)
    );
}
