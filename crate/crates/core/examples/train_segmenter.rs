//! Train the label-routed baseline and the online variant briefly, then
//! resume the online run from its saved state.
//!
//! `cargo run --release --example train_segmenter -- [iterations]`

use pimms::model::Variant;
use pimms::routing::ScanSet;
use pimms::synth::{generate_dataset, DatasetConfig, Split};
use pimms::training::{train, validation_dice, TrainConfig, TrainState};

fn main() -> pimms::Result<()> {
    let iters: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let ds = generate_dataset(&DatasetConfig { n: 60, holdout_n: 0, ..DatasetConfig::default() })?;
    let (tr, val) = (ds.split(Split::Train), ds.split(Split::Val));

    for variant in [Variant::Hemis, Variant::Online] {
        let cfg = TrainConfig { variant, max_iters: iters, val_every: iters / 4, batch: 4, ..TrainConfig::default() };
        let out = train(&cfg, tr, val, None, None, &mut |row| {
            if let Some(d) = row.val_dice {
                println!("{variant} iteration {}: l_seg {:.4} val Dice {d:.3}", row.iteration, row.l_seg);
            }
        })?;
        println!("{variant}: best val Dice {:?}", out.best_val_dice());

        if variant == Variant::Online {
            // Stop halfway, serialize the state, and finish the run from it.
            let half = TrainConfig { max_iters: iters / 2, ..cfg.clone() };
            let partial = train(&half, tr, val, None, None, &mut |_| {})?;
            let bytes = partial.state.encode();
            let resumed = train(&cfg, tr, val, None, Some(TrainState::decode(&bytes).map_err(pimms::PimmsError::InvalidArgument)?), &mut |_| {})?;
            println!("resumed run matches the uninterrupted one: {}", resumed.state == out.state);
            let test = &ds.split(Split::Test)[0];
            let pred = resumed.model.predict(&ScanSet::new(test.scans.clone())?, None)?;
            println!("online test subject: Dice {:.3}", validation_dice(&resumed.model, std::slice::from_ref(test))?);
            println!("routing scores for its scans: {:?}", pred.scores.map(|s| s.argmax_labels()));
        }
    }
    Ok(())
}
