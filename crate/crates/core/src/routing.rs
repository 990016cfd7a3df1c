//! Mapping an unordered scan set onto fixed modality slots.
//!
//! Three routes produce the same [`RoutedInput`] shape: a score-weighted
//! sum ([`route_soft`]), an argmax assignment ([`route_hard`]) and
//! assignment by known labels ([`route_labels`]). Colliding assignments are
//! summed, never averaged.

use std::cmp::Ordering;

use crate::error::{PimmsError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default number of canonical modalities.
pub const DEFAULT_MODALITIES: usize = 3;

/// Canonical slot names, in slot order.
pub const MODALITY_NAMES: [&str; 3] = ["T1", "T2", "FLAIR"];

pub fn modality_name(m: usize) -> String {
    MODALITY_NAMES
        .get(m)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("M{m}"))
}

/// Index of a canonical modality slot; the one-hot label `y_m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityLabel(pub usize);

impl ModalityLabel {
    pub const T1: ModalityLabel = ModalityLabel(0);
    pub const T2: ModalityLabel = ModalityLabel(1);
    pub const FLAIR: ModalityLabel = ModalityLabel(2);

    pub fn index(self) -> usize {
        self.0
    }

    pub fn one_hot(self, modalities: usize) -> Vec<f64> {
        (0..modalities).map(|m| if m == self.0 { 1.0 } else { 0.0 }).collect()
    }

    pub fn parse(s: &str) -> Option<ModalityLabel> {
        let s = s.trim();
        MODALITY_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(s))
            .or_else(|| s.strip_prefix('M').and_then(|i| i.parse().ok()))
            .map(ModalityLabel)
    }

    pub fn name(self) -> String {
        modality_name(self.0)
    }
}

/// `N ≥ 1` co-registered `H × W` scans without modality information.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSet {
    scans: Vec<Tensor>,
}

impl ScanSet {
    pub fn new(scans: Vec<Tensor>) -> Result<Self> {
        let Some(first) = scans.first() else {
            return Err(PimmsError::invalid("a scan set needs at least one scan"));
        };
        if first.rank() != 2 {
            return Err(PimmsError::shape(format!(
                "scans must be H×W, got {:?}",
                first.shape()
            )));
        }
        for s in &scans {
            if s.shape() != first.shape() {
                return Err(PimmsError::shape(format!(
                    "scan shapes differ: {:?} vs {:?}",
                    s.shape(),
                    first.shape()
                )));
            }
        }
        Ok(ScanSet { scans })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }

    pub fn scans(&self) -> &[Tensor] {
        &self.scans
    }

    pub fn shape(&self) -> (usize, usize) {
        let s = self.scans[0].shape();
        (s[0], s[1])
    }

    /// Scan `perm[i]` moves to position `i`.
    pub fn permuted(&self, perm: &[usize]) -> ScanSet {
        ScanSet {
            scans: perm.iter().map(|&i| self.scans[i].clone()).collect(),
        }
    }

    /// Keep the scans whose `keep` flag is set.
    pub fn select(&self, keep: &[bool]) -> Result<ScanSet> {
        ScanSet::new(
            self.scans
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(s, _)| s.clone())
                .collect(),
        )
    }
}

/// Column-stochastic `M × N` matrix; column `n` scores scan `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityScores {
    modalities: usize,
    columns: Vec<Vec<f64>>,
}

impl ModalityScores {
    /// Columns must be non-negative and sum to 1 within 1e-9.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = columns.first() else {
            return Err(PimmsError::invalid("scores need at least one column"));
        };
        let modalities = first.len();
        for (n, c) in columns.iter().enumerate() {
            if c.len() != modalities {
                return Err(PimmsError::shape(format!(
                    "score column {n} has {} entries, expected {modalities}",
                    c.len()
                )));
            }
            if c.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(PimmsError::invalid(format!("score column {n} has negative entries")));
            }
            let total: f64 = c.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(PimmsError::invalid(format!(
                    "score column {n} sums to {total}, not 1"
                )));
            }
        }
        Ok(ModalityScores {
            modalities,
            columns,
        })
    }

    pub fn one_hot(labels: &[ModalityLabel], modalities: usize) -> Result<Self> {
        ModalityScores::from_columns(labels.iter().map(|l| l.one_hot(modalities)).collect())
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, n: usize) -> &[f64] {
        &self.columns[n]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.columns[n][m]
    }

    /// Columns reordered so that column `i` is old column `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ModalityScores {
        ModalityScores {
            modalities: self.modalities,
            columns: perm.iter().map(|&i| self.columns[i].clone()).collect(),
        }
    }

    /// Per-column argmax; ties go to the lowest modality index.
    pub fn argmax_labels(&self) -> Vec<ModalityLabel> {
        self.columns
            .iter()
            .map(|c| {
                let mut best = 0;
                for (m, &v) in c.iter().enumerate() {
                    if v > c[best] {
                        best = m;
                    }
                }
                ModalityLabel(best)
            })
            .collect()
    }

    /// As an `M × N` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.columns.len();
        Tensor::from_fn(&[self.modalities, n], |i| self.columns[i % n][i / n])
    }
}

/// `M` slots in canonical order, each the shape of an input scan.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedInput {
    pub slots: Vec<Tensor>,
    /// Whether the slot received any scan (nonzero total weight).
    pub available: Vec<bool>,
}

impl RoutedInput {
    pub fn modalities(&self) -> usize {
        self.slots.len()
    }

    pub fn bitwise_eq(&self, other: &RoutedInput) -> bool {
        self.available == other.available
            && self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

fn check_columns(x: &ScanSet, n: usize) -> Result<()> {
    if x.len() != n {
        return Err(PimmsError::shape(format!(
            "{} scans but {n} score columns or labels",
            x.len()
        )));
    }
    Ok(())
}

/// `x̂_m = Σ_n S_mn x_n`, summed in input order.
pub fn route_soft(x: &ScanSet, s: &ModalityScores) -> Result<RoutedInput> {
    check_columns(x, s.len())?;
    let (h, w) = x.shape();
    let mut slots = Vec::with_capacity(s.modalities());
    let mut available = Vec::with_capacity(s.modalities());
    for m in 0..s.modalities() {
        let mut slot = Tensor::zeros(&[h, w]);
        let mut weight = 0.0;
        for (n, scan) in x.scans().iter().enumerate() {
            let a = s.get(m, n);
            weight += a;
            for (dst, &v) in slot.data_mut().iter_mut().zip(scan.data()) {
                *dst += a * v;
            }
        }
        slots.push(slot);
        available.push(weight > 0.0);
    }
    Ok(RoutedInput { slots, available })
}

/// Differentiable form of [`route_soft`]: `scans` are `H × W × 1` values and
/// `columns` the per-scan score vectors. Returns one `H × W × 1` slot per
/// modality.
pub fn route_soft_tape(tape: &mut Tape, scans: &[Var], columns: &[Var], modalities: usize) -> Result<Vec<Var>> {
    (0..modalities).map(|m| tape.mix(scans, columns, m)).collect()
}

/// Each scan goes wholly to its argmax slot.
pub fn route_hard(x: &ScanSet, s: &ModalityScores) -> Result<RoutedInput> {
    check_columns(x, s.len())?;
    route_labels(x, &s.argmax_labels(), s.modalities())
}

/// Slot `m` is the sum of the scans labelled `m`; unlabelled slots are zero.
///
/// Contributions to a slot are summed in a canonical order (lexicographic
/// over pixel values), so the result does not depend on input order.
pub fn route_labels(x: &ScanSet, labels: &[ModalityLabel], modalities: usize) -> Result<RoutedInput> {
    check_columns(x, labels.len())?;
    if let Some(l) = labels.iter().find(|l| l.0 >= modalities) {
        return Err(PimmsError::invalid(format!(
            "label {} outside {modalities} modalities",
            l.0
        )));
    }
    let (h, w) = x.shape();
    let mut slots = Vec::with_capacity(modalities);
    let mut available = Vec::with_capacity(modalities);
    for m in 0..modalities {
        let mut members: Vec<&Tensor> = x
            .scans()
            .iter()
            .zip(labels)
            .filter(|(_, l)| l.0 == m)
            .map(|(s, _)| s)
            .collect();
        members.sort_by(|a, b| canonical_order(a, b));
        let slot = match members.as_slice() {
            [] => Tensor::zeros(&[h, w]),
            [only] => (*only).clone(),
            [first, rest @ ..] => {
                let mut acc = (*first).clone();
                for r in rest {
                    acc.axpy(1.0, r);
                }
                acc
            }
        };
        available.push(!members.is_empty());
        slots.push(slot);
    }
    Ok(RoutedInput { slots, available })
}

fn canonical_order(a: &Tensor, b: &Tensor) -> Ordering {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}
