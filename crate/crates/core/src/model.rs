//! The assembled pipeline: classifier scores, routing into modality slots
//! and the segmentation network, for each of the four training variants.

use std::fmt;
use std::str::FromStr;

use crate::bind::Bindings;
use crate::classifier::{self, ClassifierConfig};
use crate::error::{PimmsError, Result};
use crate::io::Metadata;
use crate::params::ParamStore;
use crate::routing::{self, ModalityLabel, ModalityScores, RoutedInput, ScanSet};
use crate::segnet::{self, SegNetConfig, DICE_EPS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Route by known labels; no classifier.
    Hemis,
    /// Score-weighted routing with a separately trained classifier.
    Soft,
    /// Argmax routing with a separately trained classifier.
    Hard,
    /// Score-weighted routing with the classifier trained jointly.
    Online,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Hemis, Variant::Soft, Variant::Hard, Variant::Online];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Hemis => "hemis",
            Variant::Soft => "soft",
            Variant::Hard => "hard",
            Variant::Online => "online",
        }
    }

    pub fn uses_classifier(self) -> bool {
        self != Variant::Hemis
    }

    /// Offline variants that consume a separately trained classifier.
    pub fn needs_pretrained_classifier(self) -> bool {
        matches!(self, Variant::Soft | Variant::Hard)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = PimmsError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| PimmsError::config("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModelConfig {
    pub classifier: ClassifierConfig,
    pub segnet: SegNetConfig,
}

impl ModelConfig {
    pub fn patch(&self) -> (usize, usize) {
        self.classifier.input
    }

    pub fn modalities(&self) -> usize {
        self.segnet.modalities
    }

    pub fn validate(&self) -> Result<()> {
        self.classifier.validate()?;
        self.segnet.validate()?;
        if self.classifier.modalities != self.segnet.modalities {
            return Err(PimmsError::config(
                "fmod_modalities",
                "classifier and segmenter disagree on the modality count",
            ));
        }
        Ok(())
    }

    pub fn to_metadata(&self, meta: &mut Metadata) {
        self.classifier.to_metadata(meta);
        self.segnet.to_metadata(meta);
    }

    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        let cfg = ModelConfig {
            classifier: ClassifierConfig::from_metadata(meta)?,
            segnet: SegNetConfig::from_metadata(meta)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `H × W × 2` per-pixel probabilities; channel 1 is lesion.
    pub probs: Tensor,
    pub scores: Option<ModalityScores>,
    pub routed: RoutedInput,
}

impl Prediction {
    /// Lesion where its probability exceeds 0.5.
    pub fn mask(&self) -> Tensor {
        lesion_mask(&self.probs)
    }

    pub fn lesion_probability(&self) -> Tensor {
        self.probs.channel(1).expect("two-channel prediction")
    }
}

pub fn lesion_mask(probs: &Tensor) -> Tensor {
    let lesion = probs.channel(1).expect("two-channel prediction");
    lesion.map(|p| if p > 0.5 { 1.0 } else { 0.0 })
}

/// A trained model ready for inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Variant,
    pub params: ParamStore,
}

impl Model {
    /// Segment an unordered scan set. `labels` are required by the label
    /// routed variant and rejected by every other one.
    pub fn predict(&self, set: &ScanSet, labels: Option<&[ModalityLabel]>) -> Result<Prediction> {
        let normalized = normalize_set(set)?;
        let m = self.config.modalities();
        let (routed, scores) = match (self.variant, labels) {
            (Variant::Hemis, Some(l)) => (routing::route_labels(&normalized, l, m)?, None),
            (Variant::Hemis, None) => {
                return Err(PimmsError::invalid("the hemis variant routes by modality labels; none given"))
            }
            (_, Some(_)) => {
                return Err(PimmsError::invalid(format!(
                    "the {} variant does not accept modality labels",
                    self.variant
                )))
            }
            (v, None) => {
                let s = classifier::classify_set(&normalized, &self.config.classifier, &self.params)?;
                let r = if v == Variant::Hard {
                    routing::route_hard(&normalized, &s)?
                } else {
                    routing::route_soft(&normalized, &s)?
                };
                (r, Some(s))
            }
        };
        let probs = segnet::segment(&routed, &self.config.segnet, &self.params)?;
        Ok(Prediction { probs, scores, routed })
    }
}

/// Per-scan intensity normalization of a whole set.
pub fn normalize_set(set: &ScanSet) -> Result<ScanSet> {
    ScanSet::new(set.scans().iter().map(classifier::normalize_scan).collect())
}

/// Loss terms recorded for one training sample.
#[derive(Clone, Copy, Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub seg: f64,
    pub class: Option<f64>,
}

/// Inputs for one training sample. `scans` are normalized and already have
/// dropped modalities removed; `scores` are frozen classifier columns for
/// the same scans (soft and hard variants).
pub struct SampleInput<'a> {
    pub scans: &'a [Tensor],
    pub labels: &'a [ModalityLabel],
    pub scores: Option<&'a [Vec<f64>]>,
    pub mask: &'a Tensor,
}

/// Bind parameters for `variant`: segmenter weights are always trainable;
/// classifier weights only for the online variant.
pub fn bind_for_training(tape: &mut Tape, params: &ParamStore, variant: Variant) -> Result<Bindings> {
    let mut b = Bindings::new();
    b.bind(tape, params, "phi_", true)?;
    if variant == Variant::Online {
        b.bind(tape, params, classifier::PREFIX, true)?;
    }
    Ok(b)
}

/// Record the training loss of one sample: the Dice loss, plus
/// `lambda * L_class` for the online variant.
pub fn record_sample_loss(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &ModelConfig,
    variant: Variant,
    input: &SampleInput<'_>,
    lambda: f64,
) -> Result<SampleLoss> {
    let m = cfg.modalities();
    let set = ScanSet::new(input.scans.to_vec())?;
    if input.labels.len() != set.len() {
        return Err(PimmsError::shape(format!(
            "{} scans, {} modality labels",
            set.len(),
            input.labels.len()
        )));
    }
    let frozen_scores = || -> Result<ModalityScores> {
        let cols = input
            .scores
            .ok_or_else(|| PimmsError::invalid(format!("{variant} training needs classifier scores")))?;
        ModalityScores::from_columns(cols.to_vec())
    };
    let mut class = None;
    let (slots, available, class_var) = match variant {
        Variant::Hemis | Variant::Soft | Variant::Hard => {
            let routed = match variant {
                Variant::Hemis => routing::route_labels(&set, input.labels, m)?,
                Variant::Soft => routing::route_soft(&set, &frozen_scores()?)?,
                _ => routing::route_hard(&set, &frozen_scores()?)?,
            };
            (segnet::slot_constants(tape, &routed)?, routed.available, None)
        }
        Variant::Online => {
            let cols = classifier::score_columns(tape, b, &cfg.classifier, input.scans)?;
            let scan_vars = input
                .scans
                .iter()
                .map(|s| {
                    let (h, w) = s.spatial()?;
                    tape.constant(s.clone().reshape(&[h, w, 1])?)
                })
                .collect::<Result<Vec<_>>>()?;
            let slots = routing::route_soft_tape(tape, &scan_vars, &cols, m)?;
            let available = (0..m)
                .map(|row| cols.iter().map(|&c| tape.value(c).data()[row]).sum::<f64>() > 0.0)
                .collect();
            let idx: Vec<usize> = input.labels.iter().map(|l| l.0).collect();
            let ce = tape.cross_entropy(&cols, &idx)?;
            class = Some(tape.value(ce).item());
            (slots, available, Some(ce))
        }
    };
    let probs = segnet::forward(tape, b, &cfg.segnet, &slots, &available)?;
    let seg_var = tape.dice_loss(probs, input.mask, DICE_EPS)?;
    let seg = tape.value(seg_var).item();
    let total = match class_var {
        Some(ce) => {
            let weighted = tape.scale(ce, lambda)?;
            tape.add(seg_var, weighted)?
        }
        None => seg_var,
    };
    Ok(SampleLoss { total, seg, class })
}
