//! Self-verification suite: gradient checks, routing symmetries and metric
//! oracles, runnable from the command line.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bind::Bindings;
use crate::classifier::{self, ClassifierConfig};
use crate::error::Result;
use crate::eval::{avg_symmetric_distance, dice_score, wilcoxon_exact, wilcoxon_signed_rank};
use crate::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::model::{self, Model, ModelConfig, SampleInput, Variant};
use crate::ops::Padding;
use crate::params::ParamStore;
use crate::routing::{self, ModalityLabel, ModalityScores, ScanSet};
use crate::segnet::{self, SegNetConfig, DICE_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::{curriculum_dropout, lambda_schedule, CurriculumConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

impl Level {
    pub fn parse(s: &str) -> Option<Level> {
        match s {
            "quick" => Some(Level::Quick),
            "full" => Some(Level::Full),
            _ => None,
        }
    }

    fn instances(self) -> usize {
        match self {
            Level::Quick => 5,
            Level::Full => 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &str, r: Result<(bool, String)>) -> CheckResult {
    match r {
        Ok((passed, detail)) => CheckResult {
            name: name.into(),
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ w ⊙ y` for a fixed random `w`, turning any output into a scalar with
/// a nontrivial gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(randn(&mut rng, &shape))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> Vec<Tensor>, fn(&mut Tape, &[Var]) -> Result<Var>);

fn op_cases() -> Vec<OpCase> {
    vec![
        (
            "conv2d_same",
            |r| vec![randn(r, &[5, 4, 2]), randn(r, &[3, 3, 2, 3]), randn(r, &[3])],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, Padding::ZeroSame)?;
                project(t, y, 1)
            },
        ),
        (
            "conv2d_valid_stride2",
            |r| vec![randn(r, &[6, 7, 2]), randn(r, &[3, 3, 2, 2]), randn(r, &[2])],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, Padding::Valid)?;
                project(t, y, 2)
            },
        ),
        ("relu", |r| vec![randn(r, &[4, 4, 2])], |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, 3)
        }),
        ("maxpool2d", |r| vec![randn(r, &[4, 5, 2])], |t, v| {
            let y = t.maxpool2d(v[0])?;
            project(t, y, 4)
        }),
        ("softmax", |r| vec![randn(r, &[3, 4])], |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, 5)
        }),
        ("dense", |r| vec![randn(r, &[5]), randn(r, &[5, 3]), randn(r, &[3])], |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            project(t, y, 6)
        }),
        ("add_mul_scale", |r| vec![randn(r, &[3, 3]), randn(r, &[3, 3])], |t, v| {
            let a = t.add(v[0], v[1])?;
            let m = t.mul(a, v[1])?;
            let s = t.scale(m, -1.7)?;
            project(t, s, 7)
        }),
        ("global_avg_pool", |r| vec![randn(r, &[3, 4, 3])], |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, 8)
        }),
        (
            "mix",
            |r| vec![randn(r, &[3, 3, 1]), randn(r, &[3, 3, 1]), randn(r, &[3]), randn(r, &[3])],
            |t, v| {
                let c0 = t.softmax(v[2])?;
                let c1 = t.softmax(v[3])?;
                let y = t.mix(&[v[0], v[1]], &[c0, c1], 1)?;
                project(t, y, 9)
            },
        ),
        (
            "mean_var",
            |r| vec![randn(r, &[2, 3, 2]), randn(r, &[2, 3, 2]), randn(r, &[2, 3, 2])],
            |t, v| {
                let y = t.mean_var(v)?;
                project(t, y, 10)
            },
        ),
        ("dice_loss", |r| vec![randn(r, &[4, 4, 2])], |t, v| {
            let p = t.softmax(v[0])?;
            let target = Tensor::from_fn(&[4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
            t.dice_loss(p, &target, DICE_EPS)
        }),
        ("cross_entropy", |r| vec![randn(r, &[3]), randn(r, &[3])], |t, v| {
            let a = t.softmax(v[0])?;
            let b = t.softmax(v[1])?;
            t.cross_entropy(&[a, b], &[2, 0])
        }),
    ]
}

/// Tiny network shapes for end-to-end gradient checks on 4×4 inputs.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        classifier: ClassifierConfig {
            stages: 2,
            blocks_per_stage: 1,
            convs_per_block: 2,
            base_filters: 2,
            input: (4, 4),
            ..ClassifierConfig::default()
        },
        segnet: SegNetConfig {
            backend_layers: 2,
            backend_filters: 2,
            frontend_filters: 2,
            output_kernel: 3,
            ..SegNetConfig::default()
        },
    }
}

pub fn init_model_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = classifier::init_params(&cfg.classifier, &mut rng)?;
    p.merge(&segnet::init_params(&cfg.segnet, &mut rng)?);
    Ok(p)
}

/// Gradient check of the online loss `Dice + λ CE` through classifier,
/// soft routing, backends, abstraction and frontend, with respect to every
/// parameter.
pub fn micro_network_gradcheck(seed: u64, lambda: f64) -> Result<GradCheckReport> {
    let cfg = micro_config();
    let params = init_model_params(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let n = rng.random_range(1..=3);
    let scans: Vec<Tensor> = (0..n).map(|_| randn(&mut rng, &[4, 4])).collect();
    let mut labels: Vec<ModalityLabel> = (0..3).map(ModalityLabel).collect();
    labels.shuffle(&mut rng);
    labels.truncate(n);
    let mask = Tensor::from_fn(&[4, 4], |_| rng.random_bool(0.3) as u8 as f64);
    let names: Vec<String> = params.names().cloned().collect();
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    check_gradients(
        &values,
        |tape, vars| {
            let mut b = Bindings::new();
            for (name, &v) in names.iter().zip(vars) {
                b.insert(name.clone(), v);
            }
            let input = SampleInput {
                scans: &scans,
                labels: &labels,
                scores: None,
                mask: &mask,
            };
            Ok(model::record_sample_loss(tape, &b, &cfg, Variant::Online, &input, lambda)?.total)
        },
        &GradCheckConfig::default(),
    )
}

fn check_ops(level: Level) -> Vec<CheckResult> {
    let cfg = GradCheckConfig::default();
    op_cases()
        .into_iter()
        .map(|(name, make, f)| {
            let r = (|| {
                let mut report = GradCheckReport::default();
                for i in 0..level.instances() {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
                    report.merge(check_gradients(&make(&mut rng), f, &cfg)?);
                }
                Ok((
                    report.passed(),
                    format!(
                        "{} coords, {} skipped, max rel err {:.2e}",
                        report.checked,
                        report.skipped.len(),
                        report.max_rel_err
                    ),
                ))
            })();
            result(&format!("grad/{name}"), r)
        })
        .collect()
}

fn check_micro(level: Level) -> CheckResult {
    let count = match level {
        Level::Quick => 2,
        Level::Full => 100,
    };
    let r = (|| {
        let mut report = GradCheckReport::default();
        for i in 0..count {
            report.merge(micro_network_gradcheck(i as u64, 0.5)?);
        }
        Ok((
            report.passed(),
            format!("{} coords, max rel err {:.2e}", report.checked, report.max_rel_err),
        ))
    })();
    result("grad/micro_network", r)
}

fn random_scores(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Result<ModalityScores> {
    let cols = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..m).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    ModalityScores::from_columns(cols)
}

fn small_model(variant: Variant, seed: u64) -> Result<Model> {
    let config = ModelConfig {
        classifier: ClassifierConfig {
            input: (8, 8),
            ..micro_config().classifier
        },
        segnet: micro_config().segnet,
    };
    Ok(Model {
        config,
        variant,
        params: init_model_params(&config, seed)?,
    })
}

fn check_permutation(level: Level) -> CheckResult {
    let sets = match level {
        Level::Quick => 20,
        Level::Full => 200,
    };
    let r = (|| {
        let soft = small_model(Variant::Soft, 3)?;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst = 0.0f64;
        let mut bitwise = true;
        for _ in 0..sets {
            let n = rng.random_range(1..=3);
            let set = ScanSet::new((0..n).map(|_| randn(&mut rng, &[8, 8])).collect())?;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let a = soft.predict(&set, None)?.probs;
            let b = soft.predict(&set.permuted(&perm), None)?.probs;
            let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
            worst = worst.max(a.max_abs_diff(&b) / scale);
            let s = random_scores(&mut rng, 3, n)?;
            let labels = s.argmax_labels();
            let perm_labels: Vec<ModalityLabel> = perm.iter().map(|&i| labels[i]).collect();
            let hard = routing::route_hard(&set, &s)?;
            let hard_p = routing::route_hard(&set.permuted(&perm), &s.permuted(&perm))?;
            let lab = routing::route_labels(&set, &labels, 3)?;
            let lab_p = routing::route_labels(&set.permuted(&perm), &perm_labels, 3)?;
            bitwise &= hard.bitwise_eq(&hard_p) && lab.bitwise_eq(&lab_p);
        }
        Ok((worst < 1e-9 && bitwise, format!("max rel diff {worst:.2e}, hard/labels bitwise {bitwise}")))
    })();
    result("routing/permutation_invariance", r)
}

fn check_hard_equivalence(level: Level) -> CheckResult {
    let count = match level {
        Level::Quick => 100,
        Level::Full => 1000,
    };
    let r = (|| {
        let model = small_model(Variant::Hard, 5)?;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut ok = true;
        for i in 0..count {
            let n = rng.random_range(1..=3);
            let set = ScanSet::new((0..n).map(|_| randn(&mut rng, &[8, 8])).collect())?;
            let s = random_scores(&mut rng, 3, n)?;
            ok &= routing::route_hard(&set, &s)?.bitwise_eq(&routing::route_labels(&set, &s.argmax_labels(), 3)?);
            if i % 10 == 0 {
                let labels: Vec<ModalityLabel> = (0..n).map(|_| ModalityLabel(rng.random_range(0..3))).collect();
                let one_hot = ModalityScores::one_hot(&labels, 3)?;
                let a = segnet::segment(&routing::route_hard(&set, &one_hot)?, &model.config.segnet, &model.params)?;
                let b = segnet::segment(&routing::route_labels(&set, &labels, 3)?, &model.config.segnet, &model.params)?;
                ok &= a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            }
        }
        Ok((ok, format!("{count} score matrices")))
    })();
    result("routing/hard_equals_labels", r)
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Tensor {
    Tensor::from_fn(&[h, w], |_| rng.random_bool(density) as u8 as f64)
}

fn check_metrics(level: Level) -> CheckResult {
    let count = match level {
        Level::Quick => 50,
        Level::Full => 500,
    };
    let r = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let mut ok = true;
        for _ in 0..count {
            let h = rng.random_range(2..9);
            let w = rng.random_range(2..9);
            let a = random_mask(&mut rng, h, w, 0.4);
            let b = random_mask(&mut rng, h, w, 0.4);
            let (pa, pb) = (a.sum(), b.sum());
            let both: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
            let expect = if pa + pb == 0.0 { 1.0 } else { 2.0 * both / (pa + pb) };
            ok &= dice_score(&a, &b)? == expect;
            if pa > 0.0 && pb > 0.0 {
                ok &= avg_symmetric_distance(&a, &b, 1.0)? == brute_asd(&a, &b, h, w);
            }
        }
        Ok((ok, format!("{count} random mask pairs")))
    })();
    result("metrics/dice_asd_oracles", r)
}

fn brute_asd(a: &Tensor, b: &Tensor, h: usize, w: usize) -> f64 {
    let on = |m: &Tensor, y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && m.data()[y as usize * w + x as usize] > 0.5
    };
    let edge = |m: &Tensor| {
        let mut e = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                if on(m, y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !on(m, y + dy, x + dx)) {
                    e.push((y as f64, x as f64));
                }
            }
        }
        e
    };
    let (ea, eb) = (edge(a), edge(b));
    let mut sums = [0.0; 2];
    for (s, (from, to)) in sums.iter_mut().zip([(&ea, &eb), (&eb, &ea)]) {
        for p in from.iter() {
            *s += to.iter().map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
        }
    }
    (sums[0] + sums[1]) / (ea.len() + eb.len()) as f64
}

/// Two-sided p by enumerating all `2^n` sign patterns.
pub fn wilcoxon_enumeration_p(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let ranks = crate::eval::midranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
        if s.min(total - s) <= w + 1e-9 {
            hits += 1;
        }
    }
    (hits as f64 / (1u64 << n) as f64).min(1.0)
}

fn check_wilcoxon(level: Level) -> CheckResult {
    let sizes: Vec<usize> = match level {
        Level::Quick => vec![1, 3, 8],
        Level::Full => (1..=10).collect(),
    };
    let r = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut worst = 0.0f64;
        for &n in &sizes {
            for _ in 0..20 {
                // Values on a coarse grid so ties occur.
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 * 0.5).collect();
                let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 * 0.5).collect();
                let Ok(res) = wilcoxon_exact(&a, &b) else { continue };
                worst = worst.max((res.p - wilcoxon_enumeration_p(&a, &b)).abs());
            }
        }
        let a: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        let shift = wilcoxon_signed_rank(&a, &b)?.p;
        Ok((
            worst < 1e-12 && (shift - 2.0 / 1024.0).abs() < 1e-15,
            format!("max |p - enumeration| {worst:.1e}, shifted n=10 p={shift}"),
        ))
    })();
    result("stats/wilcoxon_exact", r)
}

fn check_schedule() -> CheckResult {
    let a = lambda_schedule(0, 1e-4);
    let b = lambda_schedule(10_000, 1e-4);
    let ok = a == 1.0 && (b - (-1.0f64).exp()).abs() <= 1e-12 && lambda_schedule(50, 0.0) == 1.0;
    CheckResult {
        name: "training/lambda_schedule".into(),
        passed: ok,
        detail: format!("λ(0)={a}, λ(10000)={b}"),
    }
}

/// Empirical drop-count frequencies against the configured distribution,
/// within three binomial standard deviations.
pub fn curriculum_frequencies(draws: usize, seed: u64) -> Result<(bool, String)> {
    let cfg = CurriculumConfig::default();
    let probs = cfg.probabilities(3, 3);
    let mut counts = [0usize; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..draws {
        let d = curriculum_dropout(&[true; 3], 3, &cfg, &mut rng)?;
        let k = d.iter().filter(|&&x| x).count();
        if k == 3 {
            return Ok((false, "all scans dropped".into()));
        }
        counts[k] += 1;
    }
    let mut ok = true;
    let mut detail = Vec::new();
    for k in 0..3 {
        let p = probs[k];
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        ok &= (counts[k] as f64 - mean).abs() <= 3.0 * sd;
        detail.push(format!("k={k}: {} vs {mean:.0}±{:.0}", counts[k], 3.0 * sd));
    }
    Ok((ok, detail.join(", ")))
}

fn check_curriculum(level: Level) -> CheckResult {
    let draws = match level {
        Level::Quick => 10_000,
        Level::Full => 100_000,
    };
    result("training/curriculum_frequencies", curriculum_frequencies(draws, 2024))
}

/// Run the suite. Each entry reports one named check.
pub fn run(level: Level, on_result: &mut dyn FnMut(&CheckResult, f64)) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut push = |r: CheckResult, started: Instant| {
        on_result(&r, started.elapsed().as_secs_f64());
        out.push(r);
    };
    let t = Instant::now();
    for r in check_ops(level) {
        push(r, t);
    }
    let steps: Vec<Box<dyn Fn() -> CheckResult>> = vec![
        Box::new(move || check_micro(level)),
        Box::new(move || check_permutation(level)),
        Box::new(move || check_hard_equivalence(level)),
        Box::new(move || check_metrics(level)),
        Box::new(move || check_wilcoxon(level)),
        Box::new(check_schedule),
        Box::new(move || check_curriculum(level)),
    ];
    for step in steps {
        let t = Instant::now();
        push(step(), t);
    }
    out
}

/// Counts of passed and failed checks.
pub fn summary(results: &[CheckResult]) -> BTreeMap<bool, usize> {
    let mut m = BTreeMap::new();
    for r in results {
        *m.entry(r.passed).or_insert(0) += 1;
    }
    m
}
