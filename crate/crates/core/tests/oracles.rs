//! Direct-computation oracles for the ops, metrics and generators.

use std::collections::BTreeMap;

use pimms::eval::{self, avg_symmetric_distance, dice_score, wilcoxon_exact, wilcoxon_signed_rank, CellRecords, Pattern, SubsetGrid};
use pimms::gradcheck::{check_gradients, GradCheckConfig};
use pimms::model::Variant;
use pimms::ops::Padding;
use pimms::params::{adam_step, AdamConfig, AdamState, ParamStore};
use pimms::synth::{self, sample_phantom, PhantomConfig, ProtocolFamily, LESION, BACKGROUND};
use pimms::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn conv2d_valid_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = rand_tensor(&mut rng, &[5, 5, cin]);
        let k = rand_tensor(&mut rng, &[3, 3, cin, cout]);
        let b = rand_tensor(&mut rng, &[cout]);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()).unwrap(), tape.constant(k.clone()).unwrap(), tape.constant(b.clone()).unwrap());
        let y = tape.conv2d(xv, kv, bv, 1, Padding::Valid).unwrap();
        let y = tape.value(y);
        assert_eq!(y.shape(), &[3, 3, cout]);
        for oy in 0..3 {
            for ox in 0..3 {
                for o in 0..cout {
                    let mut acc = b.data()[o];
                    for i in 0..3 {
                        for j in 0..3 {
                            for c in 0..cin {
                                acc += x.data()[((oy + i) * 5 + ox + j) * cin + c] * k.data()[((i * 3 + j) * cin + c) * cout + o];
                            }
                        }
                    }
                    assert!((y.data()[(oy * 3 + ox) * cout + o] - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv2d_same_strided_matches_padded_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (h, w, kk, s) in [(5, 6, 3, 2), (7, 4, 5, 1), (6, 6, 2, 2), (4, 4, 3, 3)] {
        let x = rand_tensor(&mut rng, &[h, w, 2]);
        let k = rand_tensor(&mut rng, &[kk, kk, 2, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()).unwrap(), tape.constant(k.clone()).unwrap(), tape.constant(b.clone()).unwrap());
        let y = tape.conv2d(xv, kv, bv, s, Padding::ZeroSame).unwrap();
        let y = tape.value(y).clone();
        let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
        assert_eq!(y.shape(), &[oh, ow, 3]);
        let pad = |n: usize, o: usize| ((o - 1) * s + kk).saturating_sub(n) / 2;
        let (pt, pl) = (pad(h, oh), pad(w, ow));
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..3 {
                    let mut acc = b.data()[o];
                    for i in 0..kk {
                        for j in 0..kk {
                            let (iy, ix) = ((oy * s + i) as isize - pt as isize, (ox * s + j) as isize - pl as isize);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for c in 0..2 {
                                acc += x.data()[((iy as usize) * w + ix as usize) * 2 + c] * k.data()[((i * kk + j) * 2 + c) * 3 + o];
                            }
                        }
                    }
                    assert!((y.data()[(oy * ow + ox) * 3 + o] - acc).abs() < 1e-12, "{h}x{w} k{kk} s{s}");
                }
            }
        }
    }
}

#[test]
fn maxpool_matches_window_max_with_zero_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = rand_tensor(&mut rng, &[6, 6, 2]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.maxpool2d(xv).unwrap();
        let y = tape.value(y);
        for r in 0..6 {
            for c in 0..6 {
                for ch in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (yy, xx) = (r + dy, c + dx);
                        let v = if yy < 6 && xx < 6 { x.data()[(yy * 6 + xx) * 2 + ch] } else { 0.0 };
                        m = m.max(v);
                    }
                    assert_eq!(y.data()[(r * 6 + c) * 2 + ch], m);
                }
            }
        }
    }
}

#[test]
fn maxpool_routes_tied_gradient_to_first_in_scan_order() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(&[2, 2, 1], 1.0)).unwrap();
    let y = tape.maxpool2d(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    // Every window's first cell in row-major order wins the tie.
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn dense_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[7]);
    let w = rand_tensor(&mut rng, &[7, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()).unwrap(), tape.constant(w.clone()).unwrap(), tape.constant(b.clone()).unwrap());
    let y = tape.dense(xv, wv, bv).unwrap();
    for o in 0..4 {
        let dot: f64 = (0..7).map(|f| x.data()[f] * w.data()[f * 4 + o]).sum::<f64>() + b.data()[o];
        assert!((tape.value(y).data()[o] - dot).abs() < 1e-12);
    }
}

#[test]
fn softmax_rows_are_distributions_and_gradients_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = Tensor::from_fn(&[4, 5], |_| rng.random_range(-30.0..30.0));
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let y = tape.softmax(xv).unwrap();
        for row in tape.value(y).data().chunks(5) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    let cfg = GradCheckConfig::default();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[2, 4]);
        let w = rand_tensor(&mut rng, &[2, 4]);
        let r = check_gradients(
            &[x],
            |t, v| {
                let s = t.softmax(v[0])?;
                let wv = t.constant(w.clone())?;
                let m = t.mul(s, wv)?;
                t.sum(m)
            },
            &cfg,
        )
        .unwrap();
        assert!(r.passed() && r.max_rel_err < 1e-6, "{r:?}");
    }
}

#[test]
fn relu_gradient_matches_away_from_zero() {
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn(&[20], |_| {
        let v: f64 = rng.random_range(0.01..1.0);
        if rng.random_bool(0.5) { v } else { -v }
    });
    let r = check_gradients(&[x], |t, v| {
        let y = t.relu(v[0])?;
        t.sum(y)
    }, &cfg)
    .unwrap();
    assert!(r.skipped.is_empty() && r.max_rel_err < 1e-6);
}

#[test]
fn composite_conv_relu_pool_softmax_matches_finite_differences() {
    let cfg = GradCheckConfig::default();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let inputs = vec![rand_tensor(&mut rng, &[5, 5, 1]), rand_tensor(&mut rng, &[3, 3, 1, 2]), rand_tensor(&mut rng, &[2])];
        let target = Tensor::from_fn(&[5, 5], |i| (i % 3 == 0) as u8 as f64);
        let r = check_gradients(
            &inputs,
            |t, v| {
                let c = t.conv2d(v[0], v[1], v[2], 1, Padding::ZeroSame)?;
                let r = t.relu(c)?;
                let p = t.maxpool2d(r)?;
                let s = t.softmax(p)?;
                t.dice_loss(s, &target, 1e-5)
            },
            &cfg,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn adam_first_step_matches_closed_form() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::scalar(0.5)).unwrap();
    let grads = BTreeMap::from([("w".to_string(), Tensor::scalar(1.0))]);
    let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    adam_step(&mut p, &grads, &mut AdamState::default(), &cfg, 1).unwrap();
    // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
    let expect = 0.5 - 0.1 / (1.0 + 1e-8);
    assert!((p.get("w").unwrap().item() - expect).abs() < 1e-15);
}

fn mask_from(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Tensor {
    Tensor::from_fn(&[h, w], |_| rng.random_bool(density) as u8 as f64)
}

fn brute_boundary(m: &Tensor, h: usize, w: usize) -> Vec<(i64, i64)> {
    let at = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && m.data()[(y as usize) * w + x as usize] == 1.0;
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if at(y, x) && (!at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

fn brute_asd(a: &Tensor, b: &Tensor, h: usize, w: usize) -> f64 {
    let (ea, eb) = (brute_boundary(a, h, w), brute_boundary(b, h, w));
    let mut sums = [0.0; 2];
    for (s, (from, to)) in sums.iter_mut().zip([(&ea, &eb), (&eb, &ea)]) {
        for p in from.iter() {
            let mut best = f64::INFINITY;
            for q in to.iter() {
                best = best.min((((p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)) as f64).sqrt());
            }
            *s += best;
        }
    }
    (sums[0] + sums[1]) / (ea.len() + eb.len()) as f64
}

#[test]
fn dice_and_asd_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let da = rng.random_range(0.05..0.9);
        let a = mask_from(&mut rng, h, w, da);
        let db = rng.random_range(0.05..0.9);
        let b = mask_from(&mut rng, h, w, db);
        let (mut pa, mut pb, mut both) = (0, 0, 0);
        for (x, y) in a.data().iter().zip(b.data()) {
            pa += (*x == 1.0) as usize;
            pb += (*y == 1.0) as usize;
            both += (*x == 1.0 && *y == 1.0) as usize;
        }
        let expect = if pa + pb == 0 { 1.0 } else { 2.0 * both as f64 / (pa + pb) as f64 };
        assert_eq!(dice_score(&a, &b).unwrap(), expect);
        if pa > 0 && pb > 0 {
            assert_eq!(avg_symmetric_distance(&a, &b, 1.0).unwrap(), brute_asd(&a, &b, h, w));
        } else {
            assert!(avg_symmetric_distance(&a, &b, 1.0).is_err());
        }
    }
}

#[test]
fn dice_counting_example() {
    // |P| = 4, |G| = 6, overlap 3.
    let p = Tensor::new(vec![2, 5], vec![1., 1., 1., 1., 0., 0., 0., 0., 0., 0.]).unwrap();
    let g = Tensor::new(vec![2, 5], vec![0., 1., 1., 1., 1., 1., 1., 0., 0., 0.]).unwrap();
    assert!((dice_score(&p, &g).unwrap() - 0.6).abs() < 1e-15);
}

fn enumeration_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|&v| {
            let below = abs.iter().filter(|&&u| u < v).count() as f64;
            let equal = abs.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let total: f64 = ranks.iter().sum();
    let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let w = observed.min(total - observed);
    let extreme = (0u32..1 << n)
        .filter(|mask| {
            let s: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            s.min(total - s) <= w
        })
        .count();
    extreme as f64 / (1u64 << n) as f64
}

#[test]
fn wilcoxon_exact_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 1..=10 {
        for _ in 0..50 {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 4.0).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 4.0).collect();
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let nonzero = d.iter().filter(|v| **v != 0.0).count();
            match wilcoxon_exact(&a, &b) {
                Ok(r) => assert!((r.p - enumeration_p(&d)).abs() < 1e-12, "n={n}"),
                Err(_) => assert_eq!(nonzero, 0),
            }
            assert_eq!(wilcoxon_signed_rank(&a, &b).is_ok(), nonzero >= 6);
        }
    }
    let a: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
    let b: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    assert_eq!(wilcoxon_signed_rank(&a, &b).unwrap().p, enumeration_p(&d));
}

#[test]
fn grid_aggregates_match_straight_line_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let subjects: Vec<String> = (0..15).map(|i| format!("s{i:02}")).collect();
    let mut records = BTreeMap::new();
    for p in Pattern::all(3) {
        for v in Variant::ALL {
            let dice: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
            let asd: Vec<Option<f64>> = (0..15).map(|_| rng.random_bool(0.8).then(|| rng.random_range(0.0..5.0))).collect();
            records.insert((p.clone(), v), CellRecords { subjects: subjects.clone(), dice, asd });
        }
    }
    let grid = SubsetGrid::from_records(records.clone()).unwrap();
    assert_eq!(grid.cells.len(), 28);
    for ((p, v), r) in &records {
        let c = grid.cell(p, *v).unwrap();
        let mut sorted = r.dice.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = (sorted[7] + 0.0) * 1.0;
        assert_eq!(c.median_dice, med);
        let defined: Vec<f64> = r.asd.iter().flatten().copied().collect();
        let mut s = 0.0;
        for x in &defined {
            s += x;
        }
        assert_eq!(c.mean_asd, Some(s / defined.len() as f64));
        if *v == Variant::Hemis {
            assert!(c.p_vs_hemis.is_none());
        } else {
            let base = &records[&(p.clone(), Variant::Hemis)].dice;
            let t = wilcoxon_signed_rank(&r.dice, base).unwrap();
            assert_eq!(c.p_vs_hemis, Some(t.p));
            let base_med = eval::median(base).unwrap();
            assert_eq!(c.flag, t.p < 0.01 && med > base_med);
        }
    }
}

#[test]
fn identical_variant_columns_are_never_flagged() {
    let subjects: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    let dice: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let mut records = BTreeMap::new();
    for p in Pattern::all(3) {
        for v in [Variant::Hemis, Variant::Soft] {
            records.insert((p.clone(), v), CellRecords { subjects: subjects.clone(), dice: dice.clone(), asd: vec![None; 10] });
        }
    }
    let grid = SubsetGrid::from_records(records).unwrap();
    assert!(grid.cells.iter().all(|c| !c.flag));
}

#[test]
fn lesion_area_fraction_stays_in_bounds() {
    let cfg = PhantomConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut empty = 0;
    for _ in 0..1000 {
        let ph = sample_phantom(&mut rng, &cfg).unwrap();
        let f = ph.lesion_fraction();
        if f == 0.0 {
            empty += 1;
        } else {
            assert!(f >= cfg.lesion_area.0 && f <= cfg.lesion_area.1 + 1.0 / 1024.0, "fraction {f}");
        }
        assert!(ph.lesion_count <= cfg.max_lesions);
    }
    // Zero-lesion phantoms at probability 0.1: within 3 binomial sd of 100.
    let sd = (1000.0f64 * 0.1 * 0.9).sqrt();
    assert!((empty as f64 - 100.0).abs() <= 3.0 * sd, "{empty} empty phantoms");
}

#[test]
fn flair_lesions_are_hyperintense() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let family = ProtocolFamily::mixed();
    let mut checked = 0;
    while checked < 100 {
        let ph = sample_phantom(&mut rng, &PhantomConfig::default()).unwrap();
        if ph.lesion_count == 0 {
            continue;
        }
        let proto = family.sample(&mut rng, "p".into());
        let img = synth::render_modality(&ph, &proto, 2, &mut rng).unwrap();
        let (mut les, mut nl, mut tis, mut nt) = (0.0, 0, 0.0, 0);
        for (v, &t) in img.data().iter().zip(&ph.tissue) {
            if t == LESION {
                les += v;
                nl += 1;
            } else if t != BACKGROUND {
                tis += v;
                nt += 1;
            }
        }
        let ratio = (les / nl as f64) / (tis / nt as f64);
        assert!(ratio >= 1.5, "lesion/tissue ratio {ratio}");
        checked += 1;
    }
}
