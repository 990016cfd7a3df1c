//! Segment one subject from its unlabelled scans in two different orders and
//! with its FLAIR-like scan alone.
//!
//! `cargo run --release --example infer`

use pimms::eval::dice_score;
use pimms::model::Variant;
use pimms::routing::{ModalityLabel, ScanSet};
use pimms::synth::{generate_dataset, DatasetConfig, Split};
use pimms::training::{train, TrainConfig};

fn main() -> pimms::Result<()> {
    let ds = generate_dataset(&DatasetConfig { n: 60, holdout_n: 0, ..DatasetConfig::default() })?;
    let cfg = TrainConfig { variant: Variant::Online, max_iters: 150, val_every: 0, batch: 4, ..TrainConfig::default() };
    let model = train(&cfg, ds.split(Split::Train), &[], None, None, &mut |_| {})?.model;

    let subject = &ds.split(Split::Test)[0];
    let set = ScanSet::new(subject.scans.clone())?;
    let forward = model.predict(&set, None)?;
    let reversed = model.predict(&set.permuted(&[2, 1, 0]), None)?;
    println!("Dice with all scans {:.3}", dice_score(&forward.mask(), &subject.mask)?);
    println!("reversed order changes the probabilities by {:e}", forward.probs.max_abs_diff(&reversed.probs));
    if let Some(s) = &forward.scores {
        let guesses: Vec<String> = s.argmax_labels().iter().map(|l| l.name()).collect();
        let truth: Vec<String> = subject.labels.iter().map(|l| l.name()).collect();
        println!("classifier guesses {guesses:?}, truth {truth:?}");
    }

    let (flair, _) = subject.with_modalities(&[false, false, true]);
    let alone = model.predict(&ScanSet::new(flair)?, None)?;
    println!("Dice with {} alone {:.3}", ModalityLabel(2).name(), dice_score(&alone.mask(), &subject.mask)?);
    Ok(())
}
