use pimms::classifier::{self, ClassifierConfig};
use pimms::error::PimmsError;
use pimms::model::{self, ModelConfig, SampleInput, Variant};
use pimms::params::ParamStore;
use pimms::routing::ModalityLabel;
use pimms::segnet::SegNetConfig;
use pimms::synth::{generate_dataset, DatasetConfig, PhantomConfig, PhantomSample, Split};
use pimms::training::{self, init_state, prepare_samples, train, train_step, CurriculumConfig, TrainConfig, TrainState};
use pimms::verify::{init_model_params, micro_config, micro_network_gradcheck};
use pimms::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model() -> ModelConfig {
    ModelConfig {
        classifier: ClassifierConfig { input: (16, 16), base_filters: 2, blocks_per_stage: 1, ..ClassifierConfig::default() },
        segnet: SegNetConfig { backend_filters: 4, frontend_filters: 4, output_kernel: 5, ..SegNetConfig::default() },
    }
}

fn small_data(n: usize) -> Vec<PhantomSample> {
    let cfg = DatasetConfig {
        n: n.max(10),
        holdout_n: 1,
        seed: 3,
        phantom: PhantomConfig { height: 16, width: 16, p_no_lesion: 0.0, lesion_area: (0.02, 0.05), ..PhantomConfig::default() },
        ..DatasetConfig::default()
    };
    generate_dataset(&cfg).unwrap().split(Split::Train)[..n].to_vec()
}

fn config(variant: Variant) -> TrainConfig {
    TrainConfig { variant, model: small_model(), batch: 2, max_iters: 4, val_every: 0, ..TrainConfig::default() }
}

fn random_fmod(cfg: &ClassifierConfig) -> ParamStore {
    classifier::init_params(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
}

fn fmod_for(variant: Variant, cfg: &TrainConfig) -> Option<ParamStore> {
    variant.needs_pretrained_classifier().then(|| random_fmod(&cfg.model.classifier))
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = small_data(4);
    for v in Variant::ALL {
        let mut cfg = config(v);
        cfg.adam.lr = 0.0;
        let fmod = fmod_for(v, &cfg);
        let mut state = init_state(&cfg, fmod.as_ref()).unwrap();
        let before = state.params.clone();
        let frozen = v.needs_pretrained_classifier().then(|| state.params.subset(classifier::PREFIX));
        let samples = prepare_samples(&data, &cfg.model.classifier, frozen.as_ref()).unwrap();
        let batch: Vec<_> = samples.iter().collect();
        let losses = train_step(&mut state, &cfg, &batch).unwrap();
        assert!(losses.total.is_finite());
        assert_eq!(state.params, before, "{v}");
        assert_eq!(state.iteration, 1);
    }
}

#[test]
fn offline_variants_keep_the_classifier_frozen() {
    let data = small_data(4);
    for v in [Variant::Soft, Variant::Hard] {
        let cfg = config(v);
        let fmod = random_fmod(&cfg.model.classifier);
        let out = train(&cfg, &data, &[], Some(&fmod), None, &mut |_| {}).unwrap();
        let after = out.state.params.subset(classifier::PREFIX);
        assert_eq!(after.len(), fmod.len());
        for (name, t) in fmod.iter() {
            let a = after.get(name).unwrap();
            assert!(t.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{v} {name}");
        }
        assert_ne!(out.state.params.subset("phi_"), init_state(&cfg, Some(&fmod)).unwrap().params.subset("phi_"));
    }
}

#[test]
fn variants_reject_the_wrong_classifier_input() {
    let cfg = config(Variant::Soft);
    let err = init_state(&cfg, None).unwrap_err();
    assert!(err.to_string().contains("soft requires pretrained f_mod"), "{err}");
    let fmod = random_fmod(&cfg.model.classifier);
    assert!(init_state(&config(Variant::Hemis), Some(&fmod)).is_err());
    assert!(init_state(&config(Variant::Online), Some(&fmod)).is_err());
}

fn online_grads(params: &ParamStore, lambda: f64, scans: &[Tensor], labels: &[ModalityLabel], mask: &Tensor) -> (f64, std::collections::BTreeMap<String, Tensor>) {
    let cfg = micro_config();
    let mut tape = Tape::new();
    let b = model::bind_for_training(&mut tape, params, Variant::Online).unwrap();
    let input = SampleInput { scans, labels, scores: None, mask };
    let loss = model::record_sample_loss(&mut tape, &b, &cfg, Variant::Online, &input, lambda).unwrap();
    tape.backward(loss.total).unwrap();
    (tape.value(loss.total).item(), tape.param_grads())
}

#[test]
fn online_gradient_is_seg_gradient_plus_lambda_class_gradient() {
    for seed in 0..5 {
        let r = micro_network_gradcheck(seed, 0.37).unwrap();
        assert!(r.passed(), "seed {seed}: {r:?}");
    }
    let params = init_model_params(&micro_config(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scans: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[4, 4], |_| rand::Rng::random_range(&mut rng, -1.0..1.0))).collect();
    let labels = vec![ModalityLabel(2), ModalityLabel(0), ModalityLabel(1)];
    let mask = Tensor::from_fn(&[4, 4], |i| (i % 5 == 0) as u8 as f64);
    let (l0, g0) = online_grads(&params, 0.0, &scans, &labels, &mask);
    let (l1, g1) = online_grads(&params, 1.0, &scans, &labels, &mask);
    let lambda = 0.3;
    let (l, g) = online_grads(&params, lambda, &scans, &labels, &mask);
    assert!((l - (l0 + lambda * (l1 - l0))).abs() < 1e-12);
    for (name, gl) in &g {
        // Classifier weights receive gradient from both terms.
        let expect = g0[name].data().iter().zip(g1[name].data()).map(|(a, b)| a + lambda * (b - a));
        for (x, y) in gl.data().iter().zip(expect) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1e-3), "{name}");
        }
    }
}

#[test]
fn two_sample_soft_run_overfits() {
    let data = small_data(2);
    let mut cfg = config(Variant::Soft);
    cfg.max_iters = 500;
    cfg.curriculum = CurriculumConfig::off();
    cfg.adam.lr = 1e-2;
    let fmod = random_fmod(&cfg.model.classifier);
    let out = train(&cfg, &data, &[], Some(&fmod), None, &mut |_| {}).unwrap();
    let dice = training::validation_dice(&out.model, &data).unwrap();
    assert!(dice > 0.95, "train Dice {dice}");
}

#[test]
fn same_seed_gives_identical_runs_and_resume_is_exact() {
    let data = small_data(6);
    let val = &data[..2];
    for v in [Variant::Hemis, Variant::Online] {
        let mut cfg = config(v);
        cfg.max_iters = 8;
        cfg.val_every = 3;
        let run = |c: &TrainConfig, resume: Option<TrainState>| train(c, &data, val, None, resume, &mut |_| {}).unwrap().state;
        let a = run(&cfg, None);
        let b = run(&cfg, None);
        assert!(a.encode() == b.encode());
        let mut half = cfg.clone();
        // Stop on a validation boundary so both runs validate at the same iterations.
        half.max_iters = 6;
        let partial = run(&half, None);
        let restored = TrainState::decode(&partial.encode()).unwrap();
        assert_eq!(restored, partial);
        let resumed = run(&cfg, Some(restored));
        assert!(resumed.encode() == a.encode(), "{v}");
        let mut other = cfg.clone();
        other.seed = 2;
        assert_ne!(run(&other, None).trace, a.trace);
    }
}

#[test]
fn lambda_decays_and_vanishes_for_huge_gamma() {
    let data = small_data(4);
    let mut cfg = config(Variant::Online);
    cfg.max_iters = 6;
    cfg.gamma = 0.5;
    let out = train(&cfg, &data, &[], None, None, &mut |_| {}).unwrap();
    let lambdas: Vec<f64> = out.state.trace.iter().map(|r| r.lambda.unwrap()).collect();
    assert_eq!(lambdas[0], 1.0);
    assert!(lambdas.windows(2).all(|w| w[1] < w[0]));
    cfg.gamma = 1e6;
    let mut state = init_state(&cfg, None).unwrap();
    let samples = prepare_samples(&data, &cfg.model.classifier, None).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    train_step(&mut state, &cfg, &batch).unwrap();
    for _ in 0..3 {
        let l = train_step(&mut state, &cfg, &batch).unwrap();
        assert_eq!(l.lambda, Some(0.0));
        assert!(l.class.unwrap() > 0.0);
        assert_eq!(l.total, l.seg);
    }
}

#[test]
fn exploding_parameters_report_divergence() {
    let data = small_data(2);
    let cfg = config(Variant::Hemis);
    let mut state = init_state(&cfg, None).unwrap();
    let names: Vec<String> = state.params.names().cloned().collect();
    for n in names {
        state.params.get_mut(&n).unwrap().scale_in_place(1e200);
    }
    let samples = prepare_samples(&data, &cfg.model.classifier, None).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    match train_step(&mut state, &cfg, &batch) {
        Err(PimmsError::Diverged { iteration: 0, .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}
