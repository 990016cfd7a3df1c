//! Pretrain the modality classifier and compare accuracy on protocols seen
//! in training with held-out protocols.
//!
//! `cargo run --release --example train_classifier -- [iterations]`

use pimms::synth::{generate_dataset, DatasetConfig, Split};
use pimms::training::{classifier_accuracy, train_classifier, TrainConfig};

fn main() -> pimms::Result<()> {
    let iters = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let ds = generate_dataset(&DatasetConfig { n: 200, holdout_n: 40, ..DatasetConfig::default() })?;
    let cfg = TrainConfig { fmod_iters: iters, ..TrainConfig::default() };
    let out = train_classifier(&cfg, ds.split(Split::Train), &mut |i, loss| {
        if i % 50 == 0 {
            println!("iteration {i}: cross-entropy {loss:.4}");
        }
    })?;
    for s in [Split::Train, Split::Test, Split::Holdout] {
        let acc = classifier_accuracy(&cfg.model.classifier, &out.params, ds.split(s))?;
        println!("{s} accuracy {acc:.3}");
    }
    Ok(())
}
