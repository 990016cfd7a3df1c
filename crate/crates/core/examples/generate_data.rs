//! Generate a small synthetic phantom dataset, write it to disk and read a
//! subject back.
//!
//! `cargo run --example generate_data -- [out_dir]`

use std::path::PathBuf;

use pimms::synth::{generate_dataset, read_split, write_dataset, DatasetConfig, Split};

fn main() -> pimms::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("pimms-example-data"));
    let cfg = DatasetConfig { n: 40, holdout_n: 8, seed: 7, ..DatasetConfig::default() };
    let ds = generate_dataset(&cfg)?;
    for s in Split::ALL {
        println!("{s}: {} subjects", ds.split(s).len());
    }
    for p in &ds.train_protocols {
        let m = &p.modalities;
        println!(
            "protocol {}: alpha {:.2}/{:.2}/{:.2} beta {:.2}/{:.2}/{:.2}",
            p.id, m[0].alpha, m[1].alpha, m[2].alpha, m[0].beta, m[1].beta, m[2].beta
        );
    }
    write_dataset(&ds, &out)?;
    let test = read_split(&out, Split::Test)?;
    let first = &test[0];
    let labels: Vec<String> = first.labels.iter().map(|l| l.name()).collect();
    println!(
        "{} from {}: scans in order {labels:?}, {} lesion pixels",
        first.id,
        first.protocol,
        first.mask.sum()
    );
    println!("written to {}", out.display());
    Ok(())
}
