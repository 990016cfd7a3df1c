//! Record a small conv → relu → pool → softmax → Dice graph and compare its
//! reverse-mode gradient with central finite differences.

use pimms::gradcheck::{check_gradients, GradCheckConfig};
use pimms::ops::Padding;
use pimms::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pimms::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = Tensor::from_fn(&[6, 6, 1], |_| rng.random_range(-1.0..1.0));
    let kernel = Tensor::from_fn(&[3, 3, 1, 2], |_| rng.random_range(-0.5..0.5));
    let bias = Tensor::new(vec![2], vec![0.1, -0.05])?;
    let target = Tensor::from_fn(&[6, 6], |i| (i % 4 == 0) as u8 as f64);

    let mut tape = Tape::new();
    let (x, k, b) = (tape.leaf(image.clone())?, tape.leaf(kernel.clone())?, tape.leaf(bias.clone())?);
    let c = tape.conv2d(x, k, b, 1, Padding::ZeroSame)?;
    let r = tape.relu(c)?;
    let p = tape.maxpool2d(r)?;
    let s = tape.softmax(p)?;
    let loss = tape.dice_loss(s, &target, 1e-5)?;
    tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item());
    println!("d loss / d bias = {:?}", tape.grad(b).unwrap().data());

    let report = check_gradients(
        &[image, kernel, bias],
        |t, v| {
            let c = t.conv2d(v[0], v[1], v[2], 1, Padding::ZeroSame)?;
            let r = t.relu(c)?;
            let p = t.maxpool2d(r)?;
            let s = t.softmax(p)?;
            t.dice_loss(s, &target, 1e-5)
        },
        &GradCheckConfig::default(),
    )?;
    println!(
        "{} coordinates checked, {} skipped at kinks, max relative error {:.2e}: {}",
        report.checked,
        report.skipped.len(),
        report.max_rel_err,
        if report.passed() { "ok" } else { "MISMATCH" }
    );
    Ok(())
}
