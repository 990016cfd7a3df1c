//! Training loops for the segmenter variants and the modality classifier.
//!
//! All randomness is derived from `(seed, purpose, iteration)`, so a run is
//! fully determined by its config and a [`TrainState`] can be resumed from
//! the iteration counter alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::bind::Bindings;
use crate::classifier::{self, ClassifierConfig};
use crate::error::{PimmsError, Result};
use crate::eval::dice_score;
use crate::io::{self, Metadata};
use crate::model::{self, Model, ModelConfig, SampleInput, Variant};
use crate::params::{adam_step, AdamConfig, AdamState, ParamStore, INIT_SCHEME};
use crate::routing::{ModalityLabel, ScanSet};
use crate::seed::{derive_seed, rng_for, Stream};
use crate::segnet;
use crate::synth::PhantomSample;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Probabilities of dropping exactly zero and exactly one scan; the rest of
/// the mass is spread evenly over dropping two or more.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumConfig {
    pub p0: f64,
    pub p1: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig { p0: 0.4, p1: 0.4 }
    }
}

impl CurriculumConfig {
    /// No dropout at all.
    pub fn off() -> Self {
        CurriculumConfig { p0: 1.0, p1: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("curriculum_p0", self.p0), ("curriculum_p1", self.p1)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PimmsError::config(k, format!("not a probability: {v}")));
            }
        }
        if self.p0 + self.p1 > 1.0 + 1e-12 {
            return Err(PimmsError::config("curriculum_p1", "p0 + p1 exceeds 1"));
        }
        Ok(())
    }

    /// Distribution of the number of dropped scans `k` for `modalities`
    /// slots when `available` scans are present. `k` never reaches
    /// `available`; the mass of impossible counts is renormalized away.
    pub fn probabilities(&self, modalities: usize, available: usize) -> Vec<f64> {
        let mut p = vec![0.0; modalities.max(1)];
        p[0] = self.p0;
        if modalities > 1 {
            p[1] = self.p1;
        }
        if modalities > 2 {
            let rest = (1.0 - self.p0 - self.p1).max(0.0) / (modalities - 2) as f64;
            for v in &mut p[2..] {
                *v = rest;
            }
        }
        p.truncate(available.max(1));
        let total: f64 = p.iter().sum();
        if total <= 0.0 {
            let mut only = vec![0.0; p.len()];
            only[0] = 1.0;
            return only;
        }
        p.iter().map(|v| v / total).collect()
    }
}

/// Choose which of the available scans to drop. Returns a mask over
/// `available`; at least one available scan always survives.
pub fn curriculum_dropout<R: Rng + ?Sized>(
    available: &[bool],
    modalities: usize,
    cfg: &CurriculumConfig,
    rng: &mut R,
) -> Result<Vec<bool>> {
    let present: Vec<usize> = (0..available.len()).filter(|&i| available[i]).collect();
    if present.is_empty() {
        return Err(PimmsError::invalid("curriculum dropout needs at least one available scan"));
    }
    let probs = cfg.probabilities(modalities, present.len());
    let u: f64 = rng.random();
    let mut k = probs.len() - 1;
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            k = i;
            break;
        }
    }
    let mut dropped = vec![false; available.len()];
    if k > 0 {
        for j in index::sample(rng, present.len(), k) {
            dropped[present[j]] = true;
        }
    }
    Ok(dropped)
}

/// `exp(-gamma * i)`.
pub fn lambda_schedule(i: u64, gamma: f64) -> f64 {
    (-gamma * i as f64).exp()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub batch: usize,
    /// Defaults to half of `batch`.
    pub online_batch: Option<usize>,
    pub gamma: f64,
    pub max_iters: u64,
    pub seed: u64,
    pub curriculum: CurriculumConfig,
    /// Validation cadence in iterations; 0 disables periodic validation.
    pub val_every: u64,
    /// Classifier pretraining.
    pub fmod_iters: u64,
    pub fmod_batch: usize,
    pub fmod_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Soft,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            batch: 8,
            online_batch: None,
            gamma: 1e-4,
            max_iters: 2000,
            seed: 1,
            curriculum: CurriculumConfig::default(),
            val_every: 100,
            fmod_iters: 1500,
            fmod_batch: 16,
            fmod_lr: 3e-3,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "variant",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "batch",
    "online_batch",
    "gamma",
    "max_iters",
    "seed",
    "curriculum_p0",
    "curriculum_p1",
    "val_every",
    "fmod_iters",
    "fmod_batch",
    "fmod_lr",
];

impl TrainConfig {
    /// Every key accepted in a config file.
    pub fn keys() -> Vec<String> {
        let mut meta = Metadata::new();
        ModelConfig::default().to_metadata(&mut meta);
        TRAIN_KEYS.iter().map(|k| k.to_string()).chain(meta.into_keys()).collect()
    }

    pub fn effective_batch(&self) -> usize {
        match self.variant {
            Variant::Online => self.online_batch.unwrap_or((self.batch / 2).max(1)),
            _ => self.batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.curriculum.validate()?;
        if self.batch == 0 {
            return Err(PimmsError::config("batch", "must be positive"));
        }
        if self.online_batch == Some(0) {
            return Err(PimmsError::config("online_batch", "must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(PimmsError::config("gamma", "must be finite and non-negative"));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(PimmsError::config("lr", "must be finite and non-negative"));
        }
        if !(self.fmod_lr > 0.0 && self.fmod_lr.is_finite()) {
            return Err(PimmsError::config("fmod_lr", "must be positive"));
        }
        if self.fmod_batch == 0 {
            return Err(PimmsError::config("fmod_batch", "must be positive"));
        }
        Ok(())
    }

    pub fn to_metadata(&self) -> Metadata {
        let mut meta = Metadata::new();
        self.model.to_metadata(&mut meta);
        let entries = [
            ("variant", self.variant.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("batch", self.batch.to_string()),
            ("gamma", self.gamma.to_string()),
            ("max_iters", self.max_iters.to_string()),
            ("seed", self.seed.to_string()),
            ("curriculum_p0", self.curriculum.p0.to_string()),
            ("curriculum_p1", self.curriculum.p1.to_string()),
            ("val_every", self.val_every.to_string()),
            ("fmod_iters", self.fmod_iters.to_string()),
            ("fmod_batch", self.fmod_batch.to_string()),
            ("fmod_lr", self.fmod_lr.to_string()),
        ];
        for (k, v) in entries {
            meta.insert(k.into(), v);
        }
        if let Some(b) = self.online_batch {
            meta.insert("online_batch".into(), b.to_string());
        }
        meta
    }

    /// Defaults overridden by `meta`. Unknown keys are an error naming the key.
    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        let known = Self::keys();
        if let Some(k) = meta.keys().find(|k| !known.contains(k)) {
            return Err(PimmsError::config(k.as_str(), "unknown key"));
        }
        let mut cfg = TrainConfig {
            model: ModelConfig::from_metadata(meta)?,
            ..TrainConfig::default()
        };
        for (k, v) in meta {
            let bad = |what: &str| PimmsError::config(k.as_str(), format!("expected {what}, got `{v}`"));
            let real = || v.parse::<f64>().map_err(|_| bad("a number"));
            let int = || v.parse::<u64>().map_err(|_| bad("a non-negative integer"));
            match k.as_str() {
                "variant" => cfg.variant = v.parse()?,
                "lr" => cfg.adam.lr = real()?,
                "beta1" => cfg.adam.beta1 = real()?,
                "beta2" => cfg.adam.beta2 = real()?,
                "adam_eps" => cfg.adam.eps = real()?,
                "weight_decay" => cfg.adam.weight_decay = real()?,
                "batch" => cfg.batch = int()? as usize,
                "online_batch" => cfg.online_batch = Some(int()? as usize),
                "gamma" => cfg.gamma = real()?,
                "max_iters" => cfg.max_iters = int()?,
                "seed" => cfg.seed = int()?,
                "curriculum_p0" => cfg.curriculum.p0 = real()?,
                "curriculum_p1" => cfg.curriculum.p1 = real()?,
                "val_every" => cfg.val_every = int()?,
                "fmod_iters" => cfg.fmod_iters = int()?,
                "fmod_batch" => cfg.fmod_batch = int()? as usize,
                "fmod_lr" => cfg.fmod_lr = real()?,
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_metadata(&io::read_key_values(path)?)
    }
}

/// A training subject with normalized scans and, for the offline classifier
/// variants, frozen score columns per scan.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub scans: Vec<Tensor>,
    pub labels: Vec<ModalityLabel>,
    pub scores: Option<Vec<Vec<f64>>>,
    pub mask: Tensor,
}

/// Normalize scans and, when `classifier_params` is given, cache the
/// classifier's score column for every scan.
pub fn prepare_samples(
    samples: &[PhantomSample],
    cfg: &ClassifierConfig,
    classifier_params: Option<&ParamStore>,
) -> Result<Vec<TrainSample>> {
    samples
        .iter()
        .map(|s| {
            if s.labels.len() != s.scans.len() {
                return Err(PimmsError::invalid(format!(
                    "subject {}: {} scans but {} modality labels",
                    s.id,
                    s.scans.len(),
                    s.labels.len()
                )));
            }
            let scans: Vec<Tensor> = s.scans.iter().map(classifier::normalize_scan).collect();
            let scores = classifier_params
                .map(|p| scans.iter().map(|x| classifier::classify(x, cfg, p)).collect::<Result<Vec<_>>>())
                .transpose()?;
            Ok(TrainSample {
                id: s.id.clone(),
                scans,
                labels: s.labels.clone(),
                scores,
                mask: s.mask.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    /// Iterations completed.
    pub iteration: u64,
    pub l_seg: f64,
    pub l_class: Option<f64>,
    pub lambda: Option<f64>,
    pub val_dice: Option<f64>,
}

pub const TRACE_HEADER: &str = "iteration,l_seg,l_class,lambda,val_dice";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            r.l_seg,
            opt(r.l_class),
            opt(r.lambda),
            opt(r.val_dice)
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestCheckpoint {
    pub val_dice: f64,
    pub iteration: u64,
    pub params: ParamStore,
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub seed: u64,
    pub variant: Variant,
    pub iteration: u64,
    pub params: ParamStore,
    pub adam: AdamState,
    pub trace: Vec<TraceRow>,
    pub best: Option<BestCheckpoint>,
}

/// Mean losses of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub seg: f64,
    pub class: Option<f64>,
    pub lambda: Option<f64>,
    /// `seg + lambda * class` for the online variant, else `seg`.
    pub total: f64,
}

fn diverged(iteration: u64, e: PimmsError) -> PimmsError {
    match e {
        PimmsError::NonFinite(what) => PimmsError::Diverged {
            iteration,
            reason: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

/// Initial parameters for `cfg.variant`. Soft and hard take the frozen
/// classifier from `fmod`; hemis and online must not be given one.
pub fn init_state(cfg: &TrainConfig, fmod: Option<&ParamStore>) -> Result<TrainState> {
    cfg.validate()?;
    let v = cfg.variant;
    match (v.needs_pretrained_classifier(), fmod) {
        (true, None) => return Err(PimmsError::invalid(format!("{v} requires pretrained f_mod"))),
        (false, Some(_)) => {
            return Err(PimmsError::invalid(format!("{v} does not take a pretrained f_mod")))
        }
        _ => {}
    }
    let mut params = segnet::init_params(&cfg.model.segnet, &mut rng_for(cfg.seed, Stream::Init, 0))?;
    if v == Variant::Online {
        params.merge(&classifier::init_params(
            &cfg.model.classifier,
            &mut rng_for(cfg.seed, Stream::Init, 1),
        )?);
    }
    if let Some(f) = fmod {
        let sub = f.subset(classifier::PREFIX);
        if sub.is_empty() {
            return Err(PimmsError::invalid("the f_mod checkpoint holds no classifier parameters"));
        }
        params.merge(&sub);
    }
    Ok(TrainState {
        seed: cfg.seed,
        variant: v,
        iteration: 0,
        params,
        adam: AdamState::default(),
        trace: Vec::new(),
        best: None,
    })
}

/// One optimizer step on `batch`. Curriculum dropout removes scans before
/// routing; per-sample gradients are averaged over the batch. With
/// `lr = 0` the losses are computed and the parameters left as they are.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &[&TrainSample]) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(PimmsError::invalid("empty batch"));
    }
    let i = state.iteration;
    let v = state.variant;
    let m = cfg.model.modalities();
    let lambda = lambda_schedule(i, cfg.gamma);
    let step_seed = derive_seed(state.seed, Stream::Dropout, i);
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let (mut seg, mut class, mut total) = (0.0, 0.0, 0.0);
    for (j, sample) in batch.iter().enumerate() {
        let mut rng = rng_for(step_seed, Stream::Dropout, j as u64);
        let dropped = curriculum_dropout(&vec![true; sample.scans.len()], m, &cfg.curriculum, &mut rng)?;
        let keep = |k: usize| !dropped[k];
        let scans: Vec<Tensor> = (0..sample.scans.len()).filter(|&k| keep(k)).map(|k| sample.scans[k].clone()).collect();
        let labels: Vec<ModalityLabel> = (0..sample.labels.len()).filter(|&k| keep(k)).map(|k| sample.labels[k]).collect();
        let scores: Option<Vec<Vec<f64>>> = sample
            .scores
            .as_ref()
            .map(|s| (0..s.len()).filter(|&k| keep(k)).map(|k| s[k].clone()).collect());
        if v == Variant::Online && labels.len() != scans.len() {
            return Err(PimmsError::invalid(format!("subject {}: online training needs modality labels", sample.id)));
        }
        let input = SampleInput {
            scans: &scans,
            labels: &labels,
            scores: scores.as_deref(),
            mask: &sample.mask,
        };
        let mut tape = Tape::new();
        let b = model::bind_for_training(&mut tape, &state.params, v).map_err(|e| diverged(i, e))?;
        let loss = model::record_sample_loss(&mut tape, &b, &cfg.model, v, &input, lambda)
            .map_err(|e| diverged(i, e))?;
        tape.backward(loss.total).map_err(|e| diverged(i, e))?;
        seg += loss.seg;
        class += loss.class.unwrap_or(0.0);
        total += tape.value(loss.total).item();
        for (name, g) in tape.param_grads() {
            match grads.get_mut(&name) {
                Some(acc) => acc.axpy(1.0, &g),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    let n = batch.len() as f64;
    let losses = StepLosses {
        seg: seg / n,
        class: (v == Variant::Online).then_some(class / n),
        lambda: (v == Variant::Online).then_some(lambda),
        total: total / n,
    };
    if !losses.total.is_finite() {
        return Err(PimmsError::Diverged {
            iteration: i,
            reason: format!("loss is {}", losses.total),
        });
    }
    for g in grads.values_mut() {
        g.scale_in_place(1.0 / n);
        g.check_finite("gradient").map_err(|e| diverged(i, e))?;
    }
    if cfg.adam.lr != 0.0 {
        adam_step(&mut state.params, &grads, &mut state.adam, &cfg.adam, i + 1)?;
    }
    state.iteration += 1;
    Ok(losses)
}

/// Mean Dice of thresholded predictions with every scan present.
pub fn validation_dice(model: &Model, samples: &[PhantomSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(PimmsError::invalid("empty validation set"));
    }
    let mut total = 0.0;
    for s in samples {
        let set = ScanSet::new(s.scans.clone())?;
        let labels = (model.variant == Variant::Hemis).then_some(s.labels.as_slice());
        let pred = model.predict(&set, labels)?;
        total += dice_score(&pred.mask(), &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// Batch indices for iteration `i`, drawn uniformly with replacement.
pub fn batch_indices(seed: u64, i: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = rng_for(seed, Stream::Shuffle, i);
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub model: Model,
}

impl TrainOutcome {
    pub fn best_val_dice(&self) -> Option<f64> {
        self.state.best.as_ref().map(|b| b.val_dice)
    }
}

/// Run `train_step` until `cfg.max_iters`, validating every `val_every`
/// iterations and at the end. The returned model holds the parameters with
/// the best validation Dice, or the final ones without validation data.
/// `resume` continues a saved state; `observer` sees every trace row.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[PhantomSample],
    val_set: &[PhantomSample],
    fmod: Option<&ParamStore>,
    resume: Option<TrainState>,
    observer: &mut dyn FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(PimmsError::invalid("empty training set"));
    }
    let mut state = match resume {
        Some(s) => {
            if s.seed != cfg.seed || s.variant != cfg.variant {
                return Err(PimmsError::invalid("saved state was produced with a different seed or variant"));
            }
            s
        }
        None => init_state(cfg, fmod)?,
    };
    let frozen = cfg
        .variant
        .needs_pretrained_classifier()
        .then(|| state.params.subset(classifier::PREFIX));
    let samples = prepare_samples(train_set, &cfg.model.classifier, frozen.as_ref())?;
    let batch = cfg.effective_batch();
    let snapshot = |params: &ParamStore| Model {
        config: cfg.model,
        variant: cfg.variant,
        params: params.clone(),
    };
    while state.iteration < cfg.max_iters {
        let idx = batch_indices(cfg.seed, state.iteration, samples.len(), batch);
        let chosen: Vec<&TrainSample> = idx.iter().map(|&k| &samples[k]).collect();
        let losses = train_step(&mut state, cfg, &chosen)?;
        let it = state.iteration;
        let validate = !val_set.is_empty()
            && ((cfg.val_every > 0 && it % cfg.val_every == 0) || it == cfg.max_iters);
        let val_dice = if validate {
            let d = validation_dice(&snapshot(&state.params), val_set)?;
            if state.best.as_ref().is_none_or(|b| d > b.val_dice) {
                state.best = Some(BestCheckpoint {
                    val_dice: d,
                    iteration: it,
                    params: state.params.clone(),
                });
            }
            Some(d)
        } else {
            None
        };
        let row = TraceRow {
            iteration: it,
            l_seg: losses.seg,
            l_class: losses.class,
            lambda: losses.lambda,
            val_dice,
        };
        observer(&row);
        state.trace.push(row);
    }
    let params = state.best.as_ref().map(|b| b.params.clone()).unwrap_or_else(|| state.params.clone());
    Ok(TrainOutcome {
        model: snapshot(&params),
        state,
    })
}

/// Checkpoint metadata describing a trained model.
pub fn model_metadata(model: &Model, cfg: &TrainConfig, state: &TrainState) -> Metadata {
    let mut meta = Metadata::new();
    model.config.to_metadata(&mut meta);
    meta.insert("variant".into(), model.variant.to_string());
    meta.insert("init_scheme".into(), INIT_SCHEME.into());
    meta.insert("step".into(), state.iteration.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    if let Some(b) = &state.best {
        meta.insert("best_iteration".into(), b.iteration.to_string());
        meta.insert("best_val_dice".into(), b.val_dice.to_string());
    }
    meta
}

pub fn save_model(path: &Path, model: &Model, meta: &Metadata) -> Result<()> {
    io::write_checkpoint(path, &model.params, meta)
}

/// Load a segmentation checkpoint; its metadata names the variant and
/// network shapes.
pub fn load_model(path: &Path) -> Result<Model> {
    let (params, meta) = io::read_checkpoint(path)?;
    let variant: Variant = meta
        .get("variant")
        .ok_or_else(|| PimmsError::format(path, "checkpoint names no variant"))?
        .parse()?;
    if variant == Variant::Hemis && params.with_prefix("fmod/").next().is_some() {
        return Err(PimmsError::format(path, "hemis checkpoint contains classifier weights"));
    }
    Ok(Model {
        config: ModelConfig::from_metadata(&meta)?,
        variant,
        params,
    })
}

// Exact state files: magic, then little-endian u64/f64 fields.
const STATE_MAGIC: &[u8; 11] = b"PIMMSSTATE1";

struct Enc(Vec<u8>);

impl Enc {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn opt(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.0.push(1);
                self.f64(x);
            }
            None => self.0.push(0),
        }
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn tensor(&mut self, t: &Tensor) {
        self.u64(t.rank() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    fn tensors<'a>(&mut self, items: impl Iterator<Item = (&'a String, &'a Tensor)>) {
        let items: Vec<_> = items.collect();
        self.u64(items.len() as u64);
        for (k, t) in items {
            self.str(k);
            self.tensor(t);
        }
    }
}

struct Dec<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or("truncated state file")?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn opt(&mut self) -> std::result::Result<Option<f64>, String> {
        match self.take(1)?[0] {
            0 => Ok(None),
            1 => Ok(Some(self.f64()?)),
            t => Err(format!("bad option tag {t}")),
        }
    }

    fn str(&mut self) -> std::result::Result<String, String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "name is not UTF-8".to_string())
    }

    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let rank = self.u64()? as usize;
        if rank > 8 {
            return Err(format!("implausible rank {rank}"));
        }
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        if len.saturating_mul(8) > self.b.len() - self.pos {
            return Err("truncated state file".into());
        }
        let data = (0..len).map(|_| self.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }

    fn tensors(&mut self) -> std::result::Result<BTreeMap<String, Tensor>, String> {
        let n = self.u64()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let k = self.str()?;
            out.insert(k, self.tensor()?);
        }
        Ok(out)
    }

    fn store(&mut self) -> std::result::Result<ParamStore, String> {
        let mut p = ParamStore::new();
        for (k, t) in self.tensors()? {
            p.insert(k, t).map_err(|e| e.to_string())?;
        }
        Ok(p)
    }
}

impl TrainState {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc(STATE_MAGIC.to_vec());
        e.u64(self.seed);
        e.str(self.variant.as_str());
        e.u64(self.iteration);
        e.tensors(self.params.iter());
        e.tensors(self.adam.m.iter());
        e.tensors(self.adam.v.iter());
        e.u64(self.trace.len() as u64);
        for r in &self.trace {
            e.u64(r.iteration);
            e.f64(r.l_seg);
            e.opt(r.l_class);
            e.opt(r.lambda);
            e.opt(r.val_dice);
        }
        match &self.best {
            Some(b) => {
                e.0.push(1);
                e.f64(b.val_dice);
                e.u64(b.iteration);
                e.tensors(b.params.iter());
            }
            None => e.0.push(0),
        }
        e.0
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<TrainState, String> {
        if !bytes.starts_with(STATE_MAGIC) {
            return Err("not a training state file".into());
        }
        let mut d = Dec {
            b: bytes,
            pos: STATE_MAGIC.len(),
        };
        let seed = d.u64()?;
        let variant: Variant = d.str()?.parse().map_err(|e: PimmsError| e.to_string())?;
        let iteration = d.u64()?;
        let params = d.store()?;
        let adam = AdamState {
            m: d.tensors()?,
            v: d.tensors()?,
        };
        let rows = d.u64()?;
        let mut trace = Vec::new();
        for _ in 0..rows {
            trace.push(TraceRow {
                iteration: d.u64()?,
                l_seg: d.f64()?,
                l_class: d.opt()?,
                lambda: d.opt()?,
                val_dice: d.opt()?,
            });
        }
        let best = match d.take(1)?[0] {
            0 => None,
            1 => Some(BestCheckpoint {
                val_dice: d.f64()?,
                iteration: d.u64()?,
                params: d.store()?,
            }),
            t => return Err(format!("bad option tag {t}")),
        };
        if d.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - d.pos));
        }
        Ok(TrainState {
            seed,
            variant,
            iteration,
            params,
            adam,
            trace,
            best,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<TrainState> {
        let bytes = io::read_bytes(path)?;
        TrainState::decode(&bytes).map_err(|r| PimmsError::format(path, r))
    }
}

/// Normalized scans and their labels, one entry per scan.
pub fn labelled_scans(samples: &[PhantomSample]) -> Result<(Vec<Tensor>, Vec<ModalityLabel>)> {
    let mut scans = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        if s.labels.len() != s.scans.len() {
            return Err(PimmsError::invalid(format!("subject {} lacks modality labels", s.id)));
        }
        scans.extend(s.scans.iter().map(classifier::normalize_scan));
        labels.extend_from_slice(&s.labels);
    }
    Ok((scans, labels))
}

/// Fraction of scans whose highest score is the true modality.
pub fn classifier_accuracy(cfg: &ClassifierConfig, params: &ParamStore, samples: &[PhantomSample]) -> Result<f64> {
    let (scans, labels) = labelled_scans(samples)?;
    if scans.is_empty() {
        return Err(PimmsError::invalid("no scans to classify"));
    }
    let mut correct = 0usize;
    for (x, l) in scans.iter().zip(&labels) {
        let s = classifier::classify(x, cfg, params)?;
        let best = (0..s.len()).fold(0, |b, m| if s[m] > s[b] { m } else { b });
        correct += (best == l.0) as usize;
    }
    Ok(correct as f64 / scans.len() as f64)
}

pub struct ClassifierOutcome {
    pub params: ParamStore,
    /// `(iterations completed, mean cross-entropy of that batch)`.
    pub trace: Vec<(u64, f64)>,
}

/// Train the modality classifier alone on every scan of `samples`.
pub fn train_classifier(
    cfg: &TrainConfig,
    samples: &[PhantomSample],
    observer: &mut dyn FnMut(u64, f64),
) -> Result<ClassifierOutcome> {
    cfg.validate()?;
    let ccfg = &cfg.model.classifier;
    let (scans, labels) = labelled_scans(samples)?;
    if scans.is_empty() {
        return Err(PimmsError::invalid("empty training set"));
    }
    let mut params = classifier::init_params(ccfg, &mut rng_for(cfg.seed, Stream::Init, 1))?;
    let adam = AdamConfig {
        lr: cfg.fmod_lr,
        ..cfg.adam
    };
    let mut moments = AdamState::default();
    let mut trace = Vec::new();
    for i in 0..cfg.fmod_iters {
        let mut rng = rng_for(cfg.seed, Stream::Data, i);
        let idx: Vec<usize> = (0..cfg.fmod_batch).map(|_| rng.random_range(0..scans.len())).collect();
        let mut tape = Tape::new();
        let mut b = Bindings::new();
        b.bind(&mut tape, &params, classifier::PREFIX, true)?;
        let batch: Vec<Tensor> = idx.iter().map(|&k| scans[k].clone()).collect();
        let cols = classifier::score_columns(&mut tape, &b, ccfg, &batch).map_err(|e| diverged(i, e))?;
        let y: Vec<usize> = idx.iter().map(|&k| labels[k].0).collect();
        let loss = tape.cross_entropy(&cols, &y).map_err(|e| diverged(i, e))?;
        tape.backward(loss)?;
        let value = tape.value(loss).item();
        adam_step(&mut params, &tape.param_grads(), &mut moments, &adam, i + 1)?;
        observer(i + 1, value);
        trace.push((i + 1, value));
    }
    Ok(ClassifierOutcome { params, trace })
}

pub fn classifier_metadata(cfg: &TrainConfig, iterations: u64) -> Metadata {
    let mut meta = Metadata::new();
    cfg.model.classifier.to_metadata(&mut meta);
    meta.insert("init_scheme".into(), INIT_SCHEME.into());
    meta.insert("step".into(), iterations.to_string());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("role".into(), "fmod".into());
    meta
}
