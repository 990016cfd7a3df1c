//! Soft, hard and label routing of an unordered scan set, and the
//! permutation invariance of each.

use pimms::routing::{route_hard, route_labels, route_soft, ModalityLabel, ModalityScores, ScanSet};
use pimms::Tensor;

fn main() -> pimms::Result<()> {
    let scans = vec![
        Tensor::filled(&[2, 2], 1.0),
        Tensor::filled(&[2, 2], 10.0),
        Tensor::filled(&[2, 2], 100.0),
    ];
    let set = ScanSet::new(scans)?;
    // Column n holds the classifier's belief about scan n.
    let scores = ModalityScores::from_columns(vec![
        vec![0.1, 0.2, 0.7],
        vec![0.8, 0.1, 0.1],
        vec![0.2, 0.6, 0.2],
    ])?;

    let soft = route_soft(&set, &scores)?;
    let hard = route_hard(&set, &scores)?;
    for m in 0..3 {
        println!(
            "slot {} soft {:7.2} hard {:7.2}",
            ModalityLabel(m).name(),
            soft.slots[m].data()[0],
            hard.slots[m].data()[0]
        );
    }

    let perm = [2, 0, 1];
    let again = route_soft(&set.permuted(&perm), &scores.permuted(&perm))?;
    let drift = soft.slots.iter().zip(&again.slots).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max);
    println!("soft routing after permuting the input: max change {drift:e}");

    let labels = scores.argmax_labels();
    println!("hard routing equals label routing: {}", hard.bitwise_eq(&route_labels(&set, &labels, 3)?));

    let partial = set.select(&[true, false, true])?;
    let missing = route_labels(&partial, &[labels[0], labels[2]], 3)?;
    println!("with one scan removed, available slots: {:?}", missing.available);
    Ok(())
}
