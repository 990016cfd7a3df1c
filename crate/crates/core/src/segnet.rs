//! Segmentation network: per-modality backends, the mean/variance
//! abstraction layer and the segmentation frontend.

use rand::Rng;

use crate::bind::Bindings;
use crate::error::{PimmsError, Result};
use crate::io::Metadata;
use crate::params::{init_conv, ParamStore};
use crate::routing::RoutedInput;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smoothing constant of the Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Namespace of the backend for modality slot `m`.
pub fn backend_prefix(m: usize) -> String {
    match m {
        0 => "phi_t1".into(),
        1 => "phi_t2".into(),
        2 => "phi_f".into(),
        m => format!("phi_m{m}"),
    }
}

pub const FRONTEND_PREFIX: &str = "phi_seg";

/// How missing modalities enter the mean/variance statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbstractionMode {
    /// All slots contribute; empty slots pass through their backend as zeros.
    Imputation,
    /// Only available slots contribute.
    Exclusion,
}

impl AbstractionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AbstractionMode::Imputation => "imputation",
            AbstractionMode::Exclusion => "exclusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "imputation" => Some(AbstractionMode::Imputation),
            "exclusion" => Some(AbstractionMode::Exclusion),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegNetConfig {
    pub modalities: usize,
    pub backend_layers: usize,
    pub backend_filters: usize,
    pub backend_kernel: usize,
    pub backend_pool: bool,
    pub frontend_filters: usize,
    pub frontend_kernel: usize,
    pub output_kernel: usize,
    pub mode: AbstractionMode,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            modalities: 3,
            backend_layers: 2,
            backend_filters: 8,
            backend_kernel: 3,
            backend_pool: true,
            frontend_filters: 8,
            frontend_kernel: 3,
            output_kernel: 7,
            mode: AbstractionMode::Imputation,
        }
    }
}

impl SegNetConfig {
    /// Kernel sizes and widths used by the original HeMIS layout.
    pub fn full_scale() -> Self {
        SegNetConfig {
            backend_filters: 48,
            backend_kernel: 5,
            frontend_filters: 16,
            frontend_kernel: 5,
            output_kernel: 21,
            ..SegNetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("seg_modalities", self.modalities),
            ("backend_layers", self.backend_layers),
            ("backend_filters", self.backend_filters),
            ("backend_kernel", self.backend_kernel),
            ("frontend_filters", self.frontend_filters),
            ("frontend_kernel", self.frontend_kernel),
            ("output_kernel", self.output_kernel),
        ];
        for (key, v) in fields {
            if v == 0 {
                return Err(PimmsError::config(key, "must be positive"));
            }
        }
        Ok(())
    }

    /// Channels of one backend embedding (`K`).
    pub fn embedding_channels(&self) -> usize {
        self.backend_filters
    }

    pub fn to_metadata(&self, meta: &mut Metadata) {
        let entries = [
            ("seg_modalities", self.modalities.to_string()),
            ("backend_layers", self.backend_layers.to_string()),
            ("backend_filters", self.backend_filters.to_string()),
            ("backend_kernel", self.backend_kernel.to_string()),
            ("backend_pool", self.backend_pool.to_string()),
            ("frontend_filters", self.frontend_filters.to_string()),
            ("frontend_kernel", self.frontend_kernel.to_string()),
            ("output_kernel", self.output_kernel.to_string()),
            ("abstraction", self.mode.as_str().to_string()),
        ];
        for (k, v) in entries {
            meta.insert(k.into(), v);
        }
    }

    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        let d = SegNetConfig::default();
        let get = |k: &str, def: usize| -> Result<usize> {
            meta.get(k)
                .map(|v| v.parse().map_err(|_| PimmsError::config(k, format!("not an integer: `{v}`"))))
                .unwrap_or(Ok(def))
        };
        let pool = match meta.get("backend_pool").map(String::as_str) {
            None => d.backend_pool,
            Some("true") => true,
            Some("false") => false,
            Some(v) => return Err(PimmsError::config("backend_pool", format!("not a bool: `{v}`"))),
        };
        let mode = match meta.get("abstraction") {
            None => d.mode,
            Some(v) => AbstractionMode::parse(v)
                .ok_or_else(|| PimmsError::config("abstraction", format!("unknown mode `{v}`")))?,
        };
        let cfg = SegNetConfig {
            modalities: get("seg_modalities", d.modalities)?,
            backend_layers: get("backend_layers", d.backend_layers)?,
            backend_filters: get("backend_filters", d.backend_filters)?,
            backend_kernel: get("backend_kernel", d.backend_kernel)?,
            backend_pool: pool,
            frontend_filters: get("frontend_filters", d.frontend_filters)?,
            frontend_kernel: get("frontend_kernel", d.frontend_kernel)?,
            output_kernel: get("output_kernel", d.output_kernel)?,
            mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn init_params<R: Rng + ?Sized>(cfg: &SegNetConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new();
    for m in 0..cfg.modalities {
        let prefix = backend_prefix(m);
        let mut c_in = 1;
        for l in 0..cfg.backend_layers {
            init_conv(&mut p, rng, &format!("{prefix}/conv{l}"), cfg.backend_kernel, c_in, cfg.backend_filters)?;
            c_in = cfg.backend_filters;
        }
    }
    let k2 = 2 * cfg.embedding_channels();
    init_conv(&mut p, rng, "phi_seg/conv0", cfg.frontend_kernel, k2, cfg.frontend_filters)?;
    init_conv(&mut p, rng, "phi_seg/conv1", cfg.output_kernel, cfg.frontend_filters, 2)?;
    Ok(p)
}

/// Record backend `φ_m` on each slot (`H × W × 1` values), giving one
/// `H × W × K` embedding per modality.
pub fn backend_forward(tape: &mut Tape, b: &Bindings, cfg: &SegNetConfig, slots: &[Var]) -> Result<Vec<Var>> {
    if slots.len() != cfg.modalities {
        return Err(PimmsError::shape(format!(
            "{} routed slots for {} backends",
            slots.len(),
            cfg.modalities
        )));
    }
    slots
        .iter()
        .enumerate()
        .map(|(m, &x)| {
            let prefix = backend_prefix(m);
            let mut y = x;
            for l in 0..cfg.backend_layers {
                y = b.conv(tape, &format!("{prefix}/conv{l}"), y, 1)?;
                y = tape.relu(y)?;
            }
            if cfg.backend_pool {
                y = tape.maxpool2d(y)?;
            }
            Ok(y)
        })
        .collect()
}

/// Mean and population variance over the contributing embeddings,
/// concatenated along channels.
pub fn abstraction(tape: &mut Tape, embeddings: &[Var], available: &[bool], mode: AbstractionMode) -> Result<Var> {
    if embeddings.len() != available.len() {
        return Err(PimmsError::shape(format!(
            "{} embeddings, {} availability flags",
            embeddings.len(),
            available.len()
        )));
    }
    let contributing: Vec<Var> = match mode {
        AbstractionMode::Imputation => embeddings.to_vec(),
        AbstractionMode::Exclusion => embeddings
            .iter()
            .zip(available)
            .filter(|(_, &a)| a)
            .map(|(&e, _)| e)
            .collect(),
    };
    if contributing.is_empty() {
        return Err(PimmsError::invalid("no available modality to abstract over"));
    }
    tape.mean_var(&contributing)
}

/// Record the frontend on the `H × W × 2K` abstraction output; returns
/// per-pixel class probabilities `H × W × 2` (channel 1 is lesion).
pub fn frontend_forward(tape: &mut Tape, b: &Bindings, alpha: Var) -> Result<Var> {
    let h = b.conv(tape, "phi_seg/conv0", alpha, 1)?;
    let h = tape.relu(h)?;
    let logits = b.conv(tape, "phi_seg/conv1", h, 1)?;
    tape.softmax(logits)
}

/// Record the full segmenter on routed slot values.
pub fn forward(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &SegNetConfig,
    slots: &[Var],
    available: &[bool],
) -> Result<Var> {
    let emb = backend_forward(tape, b, cfg, slots)?;
    let alpha = abstraction(tape, &emb, available, cfg.mode)?;
    frontend_forward(tape, b, alpha)
}

/// Record the routed input's slots as `H × W × 1` constants.
pub fn slot_constants(tape: &mut Tape, routed: &RoutedInput) -> Result<Vec<Var>> {
    routed
        .slots
        .iter()
        .map(|s| {
            let (h, w) = s.spatial()?;
            tape.constant(s.clone().reshape(&[h, w, 1])?)
        })
        .collect()
}

/// Segment a routed input with frozen parameters.
pub fn segment(routed: &RoutedInput, cfg: &SegNetConfig, params: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut b = Bindings::new();
    for m in 0..cfg.modalities {
        b.bind(&mut tape, params, &format!("{}/", backend_prefix(m)), false)?;
    }
    b.bind(&mut tape, params, "phi_seg/", false)?;
    let slots = slot_constants(&mut tape, routed)?;
    let out = forward(&mut tape, &b, cfg, &slots, &routed.available)?;
    Ok(tape.value(out).clone())
}

/// Soft Dice loss value of an `H × W × 2` prediction against a binary mask.
pub fn dice_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone())?;
    let l = tape.dice_loss(p, target, DICE_EPS)?;
    Ok(tape.value(l).item())
}
