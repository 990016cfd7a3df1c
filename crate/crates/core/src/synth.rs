//! Synthetic multi-modal phantoms.
//!
//! Each subject is a pair of latent signal maps `q1`, `q2` over a tissue
//! layout (background, tissue A, tissue B, lesion). A modality is rendered
//! as `scale * (alpha * q1 + beta * q2) + offset` plus Gaussian noise, so
//! every modality observes the same two signals in different proportions.
//! Protocols differ in those proportions; the protocol holdout draws them
//! from outside the training ranges.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PimmsError, Result};
use crate::io::{self, Metadata};
use crate::routing::{ModalityLabel, ScanSet};
use crate::seed::{rng_for, Stream};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const TISSUE_A: u8 = 1;
pub const TISSUE_B: u8 = 2;
pub const LESION: u8 = 3;

/// Latent `(q1, q2)` signal of each tissue class.
const TISSUE_SIGNAL: [(f64, f64); 4] = [(0.0, 0.0), (0.8, 0.3), (0.6, 0.55), (0.35, 1.4)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub max_lesions: usize,
    pub p_no_lesion: f64,
    /// Bounds of the total lesion area as a fraction of the image.
    pub lesion_area: (f64, f64),
    /// Relative amplitude of the smooth multiplicative field on q1, q2.
    pub field_amplitude: f64,
    /// Relative per-subject jitter of the tissue signals.
    pub subject_jitter: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 32,
            width: 32,
            max_lesions: 6,
            p_no_lesion: 0.1,
            lesion_area: (0.001, 0.05),
            field_amplitude: 0.05,
            subject_jitter: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPhantom {
    pub q1: Tensor,
    pub q2: Tensor,
    /// Tissue class per pixel, row-major.
    pub tissue: Vec<u8>,
    pub lesion_mask: Tensor,
    pub lesion_count: usize,
}

impl LatentPhantom {
    pub fn lesion_fraction(&self) -> f64 {
        self.lesion_mask.sum() / self.lesion_mask.len() as f64
    }
}

/// Acquisition parameters of one modality within a protocol.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModalityParams {
    pub alpha: f64,
    pub beta: f64,
    pub noise: f64,
    pub scale: f64,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub id: String,
    /// Indexed by canonical modality.
    pub modalities: Vec<ModalityParams>,
}

impl Protocol {
    /// Checks the pairwise distinctness of the `(alpha, beta)` mixtures.
    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.modalities.iter().enumerate() {
            if a.noise < 0.0 {
                return Err(PimmsError::invalid(format!("protocol {}: negative noise", self.id)));
            }
            for b in &self.modalities[i + 1..] {
                if a.alpha == b.alpha && a.beta == b.beta {
                    return Err(PimmsError::invalid(format!(
                        "protocol {}: two modalities share (alpha, beta)",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Range of each protocol parameter for one modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRange {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub offset: (f64, f64),
}

impl ParamRange {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64, noise: f64) -> ModalityParams {
        let u = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        ModalityParams {
            alpha: u(rng, self.alpha),
            beta: u(rng, self.beta),
            noise,
            scale,
            offset: u(rng, self.offset),
        }
    }

    pub fn contains(&self, alpha: f64, beta: f64) -> bool {
        (self.alpha.0..=self.alpha.1).contains(&alpha) && (self.beta.0..=self.beta.1).contains(&beta)
    }
}

/// Parameter ranges of a protocol family, by modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolFamily {
    pub name: &'static str,
    pub ranges: Vec<ParamRange>,
    pub scale: (f64, f64),
    pub noise: (f64, f64),
}

impl ProtocolFamily {
    /// Training family: T1-like (alpha ≫ beta), T2-like (beta ≫ alpha) and
    /// FLAIR-like (beta dominant, milder tissue contrast).
    pub fn mixed() -> Self {
        ProtocolFamily {
            name: "mixed",
            ranges: vec![
                ParamRange {
                    alpha: (0.9, 1.1),
                    beta: (0.1, 0.2),
                    offset: (0.0, 0.05),
                },
                ParamRange {
                    alpha: (0.05, 0.15),
                    beta: (0.9, 1.1),
                    offset: (0.15, 0.25),
                },
                ParamRange {
                    alpha: (0.25, 0.35),
                    beta: (0.7, 0.85),
                    offset: (0.0, 0.05),
                },
            ],
            scale: (0.8, 1.2),
            noise: (0.01, 0.03),
        }
    }

    /// Holdout family: every modality's `(alpha, beta)` lies outside the
    /// training box, with T2 and FLAIR shifted towards each other.
    pub fn holdout() -> Self {
        ProtocolFamily {
            name: "holdout",
            ranges: vec![
                ParamRange {
                    alpha: (1.2, 1.3),
                    beta: (0.25, 0.3),
                    offset: (0.05, 0.1),
                },
                ParamRange {
                    alpha: (0.2, 0.26),
                    beta: (0.7, 0.85),
                    offset: (0.05, 0.12),
                },
                ParamRange {
                    alpha: (0.16, 0.22),
                    beta: (0.9, 1.0),
                    offset: (0.05, 0.12),
                },
            ],
            scale: (0.7, 1.3),
            noise: (0.02, 0.04),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, id: String) -> Protocol {
        let scale = rng.random_range(self.scale.0..self.scale.1);
        let noise = rng.random_range(self.noise.0..self.noise.1);
        Protocol {
            id,
            modalities: self.ranges.iter().map(|r| r.sample(rng, scale, noise)).collect(),
        }
    }
}

/// Separable Gaussian blur with clamped borders.
fn blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * field[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Smoothed white noise rescaled to `[-1, 1]`.
fn smooth_noise<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = blur(&white, h, w, sigma);
    let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    s.into_iter().map(|v| v / peak).collect()
}

pub fn sample_phantom<R: Rng + ?Sized>(rng: &mut R, cfg: &PhantomConfig) -> Result<LatentPhantom> {
    let (h, w) = (cfg.height, cfg.width);
    if h < 16 || w < 16 {
        return Err(PimmsError::invalid(format!("phantoms need at least 16×16, got {h}×{w}")));
    }
    let unit = h.min(w) as f64 / 32.0;

    // Brain-like ellipse split into two tissues by a smooth field.
    let cy = h as f64 / 2.0 + rng.random_range(-1.0..1.0) * unit;
    let cx = w as f64 / 2.0 + rng.random_range(-1.0..1.0) * unit;
    let ry = h as f64 * rng.random_range(0.38..0.46);
    let rx = w as f64 * rng.random_range(0.36..0.46);
    let split = smooth_noise(rng, h, w, 2.5 * unit);
    let mut tissue = vec![BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5 - cy) / ry;
            let dx = (x as f64 + 0.5 - cx) / rx;
            let r = (dx * dx + dy * dy).sqrt();
            if r < 1.0 {
                let i = y * w + x;
                tissue[i] = if 0.45 * split[i] + (0.7 - r) > 0.0 { TISSUE_A } else { TISSUE_B };
            }
        }
    }

    let mut lesion_count = 0;
    if cfg.max_lesions > 0 && !rng.random_bool(cfg.p_no_lesion.clamp(0.0, 1.0)) {
        lesion_count = rng.random_range(1..=cfg.max_lesions);
        let candidates: Vec<usize> = {
            let a: Vec<usize> = (0..h * w).filter(|&i| tissue[i] == TISSUE_A).collect();
            if a.is_empty() {
                (0..h * w).filter(|&i| tissue[i] != BACKGROUND).collect()
            } else {
                a
            }
        };
        let texture = smooth_noise(rng, h, w, 1.0 * unit);
        let mut field = vec![0.0; h * w];
        for _ in 0..lesion_count {
            let c = candidates[rng.random_range(0..candidates.len())];
            let (cy, cx) = ((c / w) as f64, (c % w) as f64);
            let radius = rng.random_range(1.0..2.5) * unit;
            for (i, f) in field.iter_mut().enumerate() {
                let dy = (i / w) as f64 - cy;
                let dx = (i % w) as f64 - cx;
                *f += (-(dx * dx + dy * dy) / (2.0 * radius * radius)).exp();
            }
        }
        for (f, t) in field.iter_mut().zip(&texture) {
            *f *= 1.0 + 0.4 * t;
        }
        let tissue_px = tissue.iter().filter(|&&t| t != BACKGROUND).count();
        let (lo, hi) = cfg.lesion_area;
        let frac = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let target = ((frac * (h * w) as f64).round() as usize)
            .max((lo * (h * w) as f64).ceil() as usize)
            .max(1)
            .min(tissue_px.saturating_sub(1));
        let mut order: Vec<usize> = (0..h * w)
            .filter(|&i| tissue[i] != BACKGROUND && field[i] > 1e-6)
            .collect();
        order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
        for &i in order.iter().take(target) {
            tissue[i] = LESION;
        }
    }

    let jitter = |rng: &mut R| 1.0 + cfg.subject_jitter * rng.random_range(-1.0..1.0);
    let signal: Vec<(f64, f64)> = TISSUE_SIGNAL
        .iter()
        .map(|&(a, b)| (a * jitter(rng), b * jitter(rng)))
        .collect();
    let f1 = smooth_noise(rng, h, w, 6.0 * unit);
    let f2 = smooth_noise(rng, h, w, 6.0 * unit);
    let amp = cfg.field_amplitude;
    let q1 = Tensor::from_fn(&[h, w], |i| signal[tissue[i] as usize].0 * (1.0 + amp * f1[i]));
    let q2 = Tensor::from_fn(&[h, w], |i| signal[tissue[i] as usize].1 * (1.0 + amp * f2[i]));
    let lesion_mask = Tensor::from_fn(&[h, w], |i| if tissue[i] == LESION { 1.0 } else { 0.0 });
    Ok(LatentPhantom {
        q1,
        q2,
        tissue,
        lesion_mask,
        lesion_count,
    })
}

/// `scale * (alpha * q1 + beta * q2) + offset + N(0, noise)`.
pub fn render_modality<R: Rng + ?Sized>(
    phantom: &LatentPhantom,
    protocol: &Protocol,
    modality: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let p = protocol.modalities.get(modality).ok_or_else(|| {
        PimmsError::invalid(format!(
            "modality {modality} not in protocol {} ({} modalities)",
            protocol.id,
            protocol.modalities.len()
        ))
    })?;
    let normal = Normal::new(0.0, p.noise.max(0.0)).map_err(|e| PimmsError::invalid(e.to_string()))?;
    let q1 = phantom.q1.data();
    let q2 = phantom.q2.data();
    Ok(Tensor::from_fn(phantom.q1.shape(), |i| {
        let clean = p.scale * (p.alpha * q1[i] + p.beta * q2[i]) + p.offset;
        if p.noise > 0.0 {
            clean + normal.sample(rng)
        } else {
            clean
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Holdout,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Holdout];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Holdout => "holdout",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| PimmsError::config("split", format!("unknown split `{s}`")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One subject: its scans in arbitrary order with their modality labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub id: String,
    pub scans: Vec<Tensor>,
    pub labels: Vec<ModalityLabel>,
    pub protocol: String,
    pub mask: Tensor,
    pub seed: u64,
}

impl PhantomSample {
    pub fn scan_set(&self) -> Result<ScanSet> {
        ScanSet::new(self.scans.clone())
    }

    /// Scans whose label is marked present, with their labels.
    pub fn with_modalities(&self, present: &[bool]) -> (Vec<Tensor>, Vec<ModalityLabel>) {
        self.scans
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| present.get(l.0).copied().unwrap_or(false))
            .map(|(s, &l)| (s.clone(), l))
            .unzip()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Subjects in the train/val/test pool.
    pub n: usize,
    /// Subjects rendered with holdout protocols.
    pub holdout_n: usize,
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub train_protocols: usize,
    pub holdout_protocols: usize,
    /// Shuffle the scan order of each subject.
    pub shuffle_scans: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n: 100,
            holdout_n: 20,
            seed: 1,
            phantom: PhantomConfig::default(),
            train_protocols: 8,
            holdout_protocols: 2,
            shuffle_scans: true,
        }
    }
}

impl DatasetConfig {
    pub fn keys() -> &'static [&'static str] {
        &[
            "n",
            "holdout_n",
            "seed",
            "height",
            "width",
            "max_lesions",
            "p_no_lesion",
            "lesion_min_frac",
            "lesion_max_frac",
            "field_amplitude",
            "subject_jitter",
            "train_protocols",
            "holdout_protocols",
            "shuffle_scans",
        ]
    }

    pub fn to_metadata(&self) -> Metadata {
        let p = &self.phantom;
        let vals = [
            self.n.to_string(),
            self.holdout_n.to_string(),
            self.seed.to_string(),
            p.height.to_string(),
            p.width.to_string(),
            p.max_lesions.to_string(),
            p.p_no_lesion.to_string(),
            p.lesion_area.0.to_string(),
            p.lesion_area.1.to_string(),
            p.field_amplitude.to_string(),
            p.subject_jitter.to_string(),
            self.train_protocols.to_string(),
            self.holdout_protocols.to_string(),
            self.shuffle_scans.to_string(),
        ];
        Self::keys()
            .iter()
            .zip(vals)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Override defaults with the given keys; unknown keys are an error.
    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        let mut cfg = DatasetConfig::default();
        for (k, v) in meta {
            let bad = |what: &str| PimmsError::config(k, format!("expected {what}, got `{v}`"));
            let int = || v.parse::<usize>().map_err(|_| bad("an integer"));
            let real = || v.parse::<f64>().map_err(|_| bad("a number"));
            match k.as_str() {
                "n" => cfg.n = int()?,
                "holdout_n" => cfg.holdout_n = int()?,
                "seed" => cfg.seed = v.parse().map_err(|_| bad("an integer"))?,
                "height" => cfg.phantom.height = int()?,
                "width" => cfg.phantom.width = int()?,
                "max_lesions" => cfg.phantom.max_lesions = int()?,
                "p_no_lesion" => cfg.phantom.p_no_lesion = real()?,
                "lesion_min_frac" => cfg.phantom.lesion_area.0 = real()?,
                "lesion_max_frac" => cfg.phantom.lesion_area.1 = real()?,
                "field_amplitude" => cfg.phantom.field_amplitude = real()?,
                "subject_jitter" => cfg.phantom.subject_jitter = real()?,
                "train_protocols" => cfg.train_protocols = int()?,
                "holdout_protocols" => cfg.holdout_protocols = int()?,
                "shuffle_scans" => cfg.shuffle_scans = v.parse().map_err(|_| bad("true or false"))?,
                _ => return Err(PimmsError::config(k, "unknown key")),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(PimmsError::config("n", "must be positive"));
        }
        if self.train_protocols == 0 {
            return Err(PimmsError::config("train_protocols", "must be positive"));
        }
        if self.holdout_n > 0 && self.holdout_protocols == 0 {
            return Err(PimmsError::config("holdout_protocols", "must be positive"));
        }
        if self.phantom.height < 16 || self.phantom.width < 16 {
            return Err(PimmsError::config("height", "phantoms need at least 16×16"));
        }
        let (lo, hi) = self.phantom.lesion_area;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(PimmsError::config("lesion_min_frac", "need 0 < min <= max < 1"));
        }
        if !(0.0..=1.0).contains(&self.phantom.p_no_lesion) {
            return Err(PimmsError::config("p_no_lesion", "must be a probability"));
        }
        Ok(())
    }

    /// Train/val/test sizes: 80/10/10 of `n`, remainder to test.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let train = self.n * 8 / 10;
        let val = self.n / 10;
        (train, val, self.n - train - val)
    }
}

/// Generated subjects by split, plus the protocols used.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train_protocols: Vec<Protocol>,
    pub holdout_protocols: Vec<Protocol>,
    pub splits: BTreeMap<Split, Vec<PhantomSample>>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[PhantomSample] {
        self.splits.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn protocols(family: &ProtocolFamily, seed: u64, count: usize) -> Vec<Protocol> {
    let base = if family.name == "holdout" { 1000 } else { 0 };
    (0..count)
        .map(|k| {
            let mut rng = rng_for(seed, Stream::Protocol, (base + k) as u64);
            family.sample(&mut rng, format!("{}-{k:02}", family.name))
        })
        .collect()
}

/// Render one subject from its own derived seed.
pub fn generate_sample(
    cfg: &DatasetConfig,
    protocols: &[Protocol],
    index: u64,
    id: String,
) -> Result<PhantomSample> {
    let mut rng: ChaCha8Rng = rng_for(cfg.seed, Stream::Sample, index);
    let seed = rng.random::<u64>();
    let protocol = &protocols[rng.random_range(0..protocols.len())];
    let phantom = sample_phantom(&mut rng, &cfg.phantom)?;
    let mut order: Vec<usize> = (0..protocol.modalities.len()).collect();
    if cfg.shuffle_scans {
        order.shuffle(&mut rng);
    }
    let mut scans = Vec::with_capacity(order.len());
    for &m in &order {
        scans.push(render_modality(&phantom, protocol, m, &mut rng)?.round_to_f32());
    }
    Ok(PhantomSample {
        id,
        scans,
        labels: order.into_iter().map(ModalityLabel).collect(),
        protocol: protocol.id.clone(),
        mask: phantom.lesion_mask,
        seed,
    })
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let train_protocols = protocols(&ProtocolFamily::mixed(), cfg.seed, cfg.train_protocols);
    let holdout_protocols = protocols(&ProtocolFamily::holdout(), cfg.seed, cfg.holdout_protocols);
    for p in train_protocols.iter().chain(&holdout_protocols) {
        p.validate()?;
    }
    let (n_train, n_val, _) = cfg.split_sizes();
    let mut splits: BTreeMap<Split, Vec<PhantomSample>> = BTreeMap::new();
    for i in 0..cfg.n {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let s = generate_sample(cfg, &train_protocols, i as u64, format!("s{i:05}"))?;
        splits.entry(split).or_default().push(s);
    }
    for i in 0..cfg.holdout_n {
        let idx = (cfg.n + i) as u64;
        let s = generate_sample(cfg, &holdout_protocols, idx, format!("h{i:05}"))?;
        splits.entry(Split::Holdout).or_default().push(s);
    }
    Ok(Dataset {
        config: cfg.clone(),
        train_protocols,
        holdout_protocols,
        splits,
    })
}

fn protocol_lines(out: &mut String, p: &Protocol) {
    for (m, mp) in p.modalities.iter().enumerate() {
        out.push_str(&format!(
            "{}.{}={},{},{},{},{}\n",
            p.id,
            ModalityLabel(m).name(),
            mp.alpha,
            mp.beta,
            mp.noise,
            mp.scale,
            mp.offset
        ));
    }
}

/// Layout: `<root>/<split>/<id>/{scan_k.rawt, mask.rawt, meta.txt}`, plus
/// `dataset.txt` (generator config) and `protocols.txt` at the root.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| PimmsError::io(root, e))?;
    io::write_atomic(&root.join("dataset.txt"), io::encode_metadata(&ds.config.to_metadata()).as_bytes())?;
    let mut text = String::new();
    for p in ds.train_protocols.iter().chain(&ds.holdout_protocols) {
        protocol_lines(&mut text, p);
    }
    io::write_atomic(&root.join("protocols.txt"), text.as_bytes())?;
    for (split, samples) in &ds.splits {
        for s in samples {
            let dir = root.join(split.as_str()).join(&s.id);
            for (k, scan) in s.scans.iter().enumerate() {
                io::write_rawt(&dir.join(format!("scan_{k}.rawt")), scan)?;
            }
            io::write_rawt(&dir.join("mask.rawt"), &s.mask)?;
            let labels: Vec<String> = s.labels.iter().map(|l| l.name()).collect();
            let meta = Metadata::from([
                ("labels".to_string(), labels.join(",")),
                ("protocol".to_string(), s.protocol.clone()),
                ("seed".to_string(), s.seed.to_string()),
            ]);
            io::write_atomic(&dir.join("meta.txt"), io::encode_metadata(&meta).as_bytes())?;
        }
    }
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<PhantomSample> {
    let meta = io::read_key_values(&dir.join("meta.txt"))?;
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| PimmsError::format(dir.join("meta.txt"), format!("missing key `{k}`")))
    };
    let labels = field("labels")?
        .split(',')
        .map(|l| {
            ModalityLabel::parse(l)
                .ok_or_else(|| PimmsError::format(dir.join("meta.txt"), format!("unknown modality `{l}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let scans = (0..labels.len())
        .map(|k| io::read_rawt(&dir.join(format!("scan_{k}.rawt"))))
        .collect::<Result<Vec<_>>>()?;
    let seed = field("seed")?
        .parse()
        .map_err(|_| PimmsError::format(dir.join("meta.txt"), "seed is not an integer"))?;
    Ok(PhantomSample {
        id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        scans,
        labels,
        protocol: field("protocol")?,
        mask: io::read_rawt(&dir.join("mask.rawt"))?,
        seed,
    })
}

/// All subjects of one split, ordered by directory name.
pub fn read_split(root: &Path, split: Split) -> Result<Vec<PhantomSample>> {
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut entries: Vec<_> = fs::read_dir(&dir)
        .map_err(|e| PimmsError::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    entries.iter().map(|p| read_sample(p)).collect()
}
