//! Modality classifier: a small residual CNN mapping one scan to a
//! distribution over the canonical modalities.
//!
//! Layout: a stem convolution, `stages` groups of residual blocks (filters
//! double and resolution halves at each new stage), global average pooling
//! and a dense softmax head. Every block is `convs_per_block` convolutions
//! with ReLU in between, added to a skip path; the first block of a
//! downsampling stage uses a strided 1×1 convolution on the skip path.

use rand::Rng;

use crate::bind::Bindings;
use crate::error::{PimmsError, Result};
use crate::io::Metadata;
use crate::params::{init_conv, init_dense, ParamStore};
use crate::routing::{ModalityLabel, ModalityScores, ScanSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PREFIX: &str = "fmod/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub modalities: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub convs_per_block: usize,
    pub base_filters: usize,
    pub kernel: usize,
    pub input: (usize, usize),
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            modalities: 3,
            stages: 2,
            blocks_per_stage: 2,
            convs_per_block: 2,
            base_filters: 4,
            kernel: 3,
            input: (32, 32),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("fmod_modalities", self.modalities),
            ("fmod_stages", self.stages),
            ("fmod_blocks_per_stage", self.blocks_per_stage),
            ("fmod_convs_per_block", self.convs_per_block),
            ("fmod_base_filters", self.base_filters),
            ("fmod_kernel", self.kernel),
            ("patch_h", self.input.0),
            ("patch_w", self.input.1),
        ];
        for (key, v) in fields {
            if v == 0 {
                return Err(PimmsError::config(key, "must be positive"));
            }
        }
        if self.modalities < 2 {
            return Err(PimmsError::config("fmod_modalities", "need at least two classes"));
        }
        Ok(())
    }

    /// Convolution and dense layers along the longest path.
    pub fn depth(&self) -> usize {
        1 + self.stages * self.blocks_per_stage * self.convs_per_block + 1
    }

    fn filters(&self, stage: usize) -> usize {
        self.base_filters << stage
    }

    pub fn to_metadata(&self, meta: &mut Metadata) {
        let entries = [
            ("fmod_modalities", self.modalities),
            ("fmod_stages", self.stages),
            ("fmod_blocks_per_stage", self.blocks_per_stage),
            ("fmod_convs_per_block", self.convs_per_block),
            ("fmod_base_filters", self.base_filters),
            ("fmod_kernel", self.kernel),
            ("patch_h", self.input.0),
            ("patch_w", self.input.1),
        ];
        for (k, v) in entries {
            meta.insert(k.into(), v.to_string());
        }
    }

    /// Read the keys written by [`ClassifierConfig::to_metadata`], keeping
    /// defaults for absent ones.
    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        let d = ClassifierConfig::default();
        let get = |k: &str, def: usize| -> Result<usize> {
            meta.get(k)
                .map(|v| v.parse().map_err(|_| PimmsError::config(k, format!("not an integer: `{v}`"))))
                .unwrap_or(Ok(def))
        };
        let cfg = ClassifierConfig {
            modalities: get("fmod_modalities", d.modalities)?,
            stages: get("fmod_stages", d.stages)?,
            blocks_per_stage: get("fmod_blocks_per_stage", d.blocks_per_stage)?,
            convs_per_block: get("fmod_convs_per_block", d.convs_per_block)?,
            base_filters: get("fmod_base_filters", d.base_filters)?,
            kernel: get("fmod_kernel", d.kernel)?,
            input: (get("patch_h", d.input.0)?, get("patch_w", d.input.1)?),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("fmod/s{stage}b{block}")
}

pub fn init_params<R: Rng + ?Sized>(cfg: &ClassifierConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    let k = cfg.kernel;
    init_conv(&mut p, rng, "fmod/stem", k, 1, cfg.filters(0))?;
    let mut c_in = cfg.filters(0);
    for s in 0..cfg.stages {
        let c_out = cfg.filters(s);
        for b in 0..cfg.blocks_per_stage {
            let prefix = block_prefix(s, b);
            for c in 0..cfg.convs_per_block {
                let from = if c == 0 { c_in } else { c_out };
                init_conv(&mut p, rng, &format!("{prefix}/conv{c}"), k, from, c_out)?;
            }
            if c_in != c_out || (s > 0 && b == 0) {
                init_conv(&mut p, rng, &format!("{prefix}/skip"), 1, c_in, c_out)?;
            }
            c_in = c_out;
        }
    }
    init_dense(&mut p, rng, "fmod/head", c_in, cfg.modalities)?;
    Ok(p)
}

/// Zero mean, unit variance over the patch. A constant patch maps to zeros.
pub fn normalize_scan(scan: &Tensor) -> Tensor {
    let n = scan.len() as f64;
    let mean = scan.sum() / n;
    let var = scan.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        return Tensor::zeros(scan.shape());
    }
    let sd = var.sqrt();
    scan.map(|v| (v - mean) / sd)
}

/// Record the classifier on `tape`. `scan` is an already-normalized
/// `H × W × 1` value; returns the length-`M` probability vector.
pub fn forward(tape: &mut Tape, b: &Bindings, cfg: &ClassifierConfig, scan: Var) -> Result<Var> {
    let shape = tape.value(scan).shape().to_vec();
    if shape != [cfg.input.0, cfg.input.1, 1] {
        return Err(PimmsError::shape(format!(
            "classifier expects {}×{}×1 input, got {shape:?}",
            cfg.input.0, cfg.input.1
        )));
    }
    let stem = b.conv(tape, "fmod/stem", scan, 1)?;
    let mut x = tape.relu(stem)?;
    for s in 0..cfg.stages {
        for blk in 0..cfg.blocks_per_stage {
            let prefix = block_prefix(s, blk);
            let stride = if s > 0 && blk == 0 { 2 } else { 1 };
            let mut y = x;
            for c in 0..cfg.convs_per_block {
                let st = if c == 0 { stride } else { 1 };
                y = b.conv(tape, &format!("{prefix}/conv{c}"), y, st)?;
                if c + 1 < cfg.convs_per_block {
                    y = tape.relu(y)?;
                }
            }
            let skip_name = format!("{prefix}/skip");
            let skip = match b.get(&format!("{skip_name}/w")) {
                Ok(_) => b.conv(tape, &skip_name, x, stride)?,
                Err(_) => x,
            };
            let sum = tape.add(y, skip)?;
            x = tape.relu(sum)?;
        }
    }
    let pooled = tape.global_avg_pool(x)?;
    let logits = b.dense(tape, "fmod/head", pooled)?;
    tape.softmax(logits)
}

fn as_channel_image(scan: &Tensor) -> Result<Tensor> {
    let (h, w) = scan.spatial()?;
    scan.clone().reshape(&[h, w, 1])
}

/// Score vector for one scan; normalizes the scan first.
pub fn classify(scan: &Tensor, cfg: &ClassifierConfig, params: &ParamStore) -> Result<Vec<f64>> {
    if scan.shape() != [cfg.input.0, cfg.input.1] {
        return Err(PimmsError::shape(format!(
            "classifier expects {}×{} scans, got {:?}",
            cfg.input.0,
            cfg.input.1,
            scan.shape()
        )));
    }
    let mut tape = Tape::new();
    let mut b = Bindings::new();
    b.bind(&mut tape, params, PREFIX, false)?;
    let x = tape.constant(as_channel_image(&normalize_scan(scan))?)?;
    let out = forward(&mut tape, &b, cfg, x)?;
    Ok(tape.value(out).data().to_vec())
}

/// One score column per scan, in input order.
pub fn classify_set(set: &ScanSet, cfg: &ClassifierConfig, params: &ParamStore) -> Result<ModalityScores> {
    let columns = set
        .scans()
        .iter()
        .map(|s| classify(s, cfg, params))
        .collect::<Result<Vec<_>>>()?;
    ModalityScores::from_columns(columns)
}

/// Mean categorical cross-entropy `-Σ_m y_m ln S_m` over columns, with the
/// logarithm clamped at 1e-12.
pub fn class_loss(s: &ModalityScores, labels: &[ModalityLabel]) -> Result<f64> {
    if s.len() != labels.len() {
        return Err(PimmsError::shape(format!(
            "{} score columns, {} labels",
            s.len(),
            labels.len()
        )));
    }
    let mut tape = Tape::new();
    let cols = s
        .columns()
        .iter()
        .map(|c| tape.constant(Tensor::new(vec![c.len()], c.clone())?))
        .collect::<Result<Vec<_>>>()?;
    let idx: Vec<usize> = labels.iter().map(|l| l.0).collect();
    let loss = tape.cross_entropy(&cols, &idx)?;
    Ok(tape.value(loss).item())
}

/// Record normalization-free classification of `scans` (each `H × W`,
/// already normalized) and return the score column vars.
pub fn score_columns(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &ClassifierConfig,
    normalized: &[Tensor],
) -> Result<Vec<Var>> {
    normalized
        .iter()
        .map(|s| {
            let x = tape.constant(as_channel_image(s)?)?;
            forward(tape, b, cfg, x)
        })
        .collect()
}
