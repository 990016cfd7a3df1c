//! Evaluate two variants on every modality subset and print the grid with
//! paired Wilcoxon tests against the label-routed baseline.
//!
//! `cargo run --release --example evaluate_grid`

use pimms::eval::evaluate_subsets;
use pimms::model::Variant;
use pimms::parallel::threads_from_env;
use pimms::synth::{generate_dataset, DatasetConfig, Split};
use pimms::training::{train, TrainConfig};

fn main() -> pimms::Result<()> {
    let ds = generate_dataset(&DatasetConfig { n: 120, holdout_n: 0, ..DatasetConfig::default() })?;
    let mut models = Vec::new();
    for variant in [Variant::Hemis, Variant::Online] {
        let cfg = TrainConfig { variant, max_iters: 150, val_every: 50, batch: 4, ..TrainConfig::default() };
        models.push(train(&cfg, ds.split(Split::Train), ds.split(Split::Val), None, None, &mut |_| {})?.model);
    }
    let grid = evaluate_subsets(&models, ds.split(Split::Test), threads_from_env())?;
    print!("{}", grid.render_table());
    println!();
    print!("{}", grid.to_csv());
    Ok(())
}
