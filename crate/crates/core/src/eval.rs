//! Segmentation metrics, the Wilcoxon signed-rank test and the
//! modality-subset evaluation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{PimmsError, Result};
use crate::model::{Model, Variant};
use crate::parallel;
use crate::routing::{modality_name, ScanSet};
use crate::synth::PhantomSample;
use crate::tensor::Tensor;

/// Significance threshold for flagging a variant against the baseline.
pub const SIGNIFICANCE: f64 = 0.01;

/// Largest number of nonzero differences handled by the exact null
/// distribution; larger samples use the normal approximation.
pub const EXACT_MAX_N: usize = 25;

pub const MIN_PAIRS: usize = 6;

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(PimmsError::shape(format!("mask shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    a.spatial()
}

/// `2|P ∩ G| / (|P| + |G|)` over pixels above 0.5; two empty masks score 1.
pub fn dice_score(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a > 0.5, b > 0.5);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Mask pixels with at least one 4-neighbour outside the mask; pixels
/// beyond the image edge count as outside.
pub fn boundary(mask: &Tensor) -> Result<Vec<(usize, usize)>> {
    let (h, w) = mask.spatial()?;
    let d = mask.data();
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && d[y as usize * w + x as usize] > 0.5
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(y, x) && !(inside(y - 1, x) && inside(y + 1, x) && inside(y, x - 1) && inside(y, x + 1)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    Ok(out)
}

/// Sum of nearest-neighbour distances from each `from` pixel, accumulated in order.
fn directed_sum(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    from.iter()
        .map(|&(y, x)| {
            let best = to
                .iter()
                .map(|&(v, u)| {
                    let dy = y.abs_diff(v);
                    let dx = x.abs_diff(u);
                    dy * dy + dx * dx
                })
                .min()
                .expect("nonempty boundary");
            (best as f64).sqrt()
        })
        .fold(0.0, |t, d| t + d)
}

/// Mean distance from every boundary pixel of each mask to the nearest
/// boundary pixel of the other, pooled over both boundaries and scaled by
/// `spacing`. Both masks must be nonempty.
pub fn avg_symmetric_distance(pred: &Tensor, gt: &Tensor, spacing: f64) -> Result<f64> {
    check_same_shape(pred, gt)?;
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(PimmsError::invalid(format!("pixel spacing must be positive, got {spacing}")));
    }
    let a = boundary(pred)?;
    let b = boundary(gt)?;
    if a.is_empty() || b.is_empty() {
        return Err(PimmsError::Statistics(
            "average symmetric distance is undefined for an empty mask".into(),
        ));
    }
    let total = directed_sum(&a, &b) + directed_sum(&b, &a);
    Ok(total / (a.len() + b.len()) as f64 * spacing)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Nonzero differences used.
    pub n: usize,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Midranks (1-based) of `values`.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on the paired differences `a - b`.
/// Zero differences are discarded.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    signed_rank(a, b, MIN_PAIRS, EXACT_MAX_N)
}

/// The exact-distribution test for any number of nonzero differences,
/// without the minimum used by the subset grid.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    signed_rank(a, b, 1, usize::MAX)
}

fn signed_rank(a: &[f64], b: &[f64], min_pairs: usize, exact_max: usize) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(PimmsError::shape(format!("paired lists of length {} and {}", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(PimmsError::NonFinite("wilcoxon differences"));
    }
    let n = d.len();
    if n < min_pairs {
        return Err(PimmsError::Statistics(format!(
            "{n} nonzero paired differences, at least {min_pairs} needed"
        )));
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);
    let (p, exact) = if n <= exact_max {
        (exact_p(&ranks, w), true)
    } else {
        (normal_p(&abs, n, w)?, false)
    };
    Ok(WilcoxonResult {
        w,
        w_plus,
        w_minus,
        n,
        p,
        exact,
    })
}

/// `min(1, 2 P(T <= w))` under the exact permutation null with the given
/// (possibly tied) ranks.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    // Midranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let tail: f64 = counts[..=limit.min(max)].iter().sum();
    (2.0 * tail / 2f64.powi(ranks.len() as i32)).min(1.0)
}

fn normal_p(abs: &[f64], n: usize, w: f64) -> Result<f64> {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0;
    let z = (w - mean) / var.sqrt();
    let std = Normal::standard();
    Ok((2.0 * std.cdf(z)).min(1.0))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Availability pattern over the canonical modality order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pattern(pub Vec<bool>);

impl Pattern {
    /// Every nonempty pattern: single modalities first, then pairs, and so
    /// on up to the full set.
    pub fn all(modalities: usize) -> Vec<Pattern> {
        let mut out: Vec<Pattern> = (1u32..(1 << modalities))
            .map(|bits| Pattern((0..modalities).map(|m| bits & (1 << m) != 0).collect()))
            .collect();
        out.sort_by_key(|p| (p.count(), std::cmp::Reverse(p.0.clone())));
        out
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// `1` for present, `0` for absent, e.g. `101`.
    pub fn bits(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bits(s: &str) -> Result<Pattern> {
        let p = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(PimmsError::invalid(format!("bad pattern `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if p.is_empty() || !p.contains(&true) {
            return Err(PimmsError::invalid(format!("pattern `{s}` has no modality present")));
        }
        Ok(Pattern(p))
    }

    /// `•` for present, `◦` for absent.
    pub fn dots(&self) -> String {
        self.0.iter().map(|&b| if b { '•' } else { '◦' }).collect()
    }

    pub fn names(&self) -> String {
        let names: Vec<String> = (0..self.0.len()).filter(|&m| self.0[m]).map(modality_name).collect();
        names.join("+")
    }
}

/// Per-subject results of one variant on one pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRecords {
    pub subjects: Vec<String>,
    pub dice: Vec<f64>,
    /// `None` where either mask is empty.
    pub asd: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub pattern: Pattern,
    pub variant: Variant,
    pub records: CellRecords,
    pub median_dice: f64,
    pub mean_dice: f64,
    pub median_asd: Option<f64>,
    pub mean_asd: Option<f64>,
    /// Subjects without a defined distance.
    pub asd_excluded: usize,
    pub p_vs_hemis: Option<f64>,
    pub flag: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetGrid {
    pub patterns: Vec<Pattern>,
    pub variants: Vec<Variant>,
    /// Row-major: pattern, then variant.
    pub cells: Vec<GridCell>,
}

impl SubsetGrid {
    /// Aggregate paired per-subject records. Every cell must list the same
    /// subjects in the same order.
    pub fn from_records(records: BTreeMap<(Pattern, Variant), CellRecords>) -> Result<SubsetGrid> {
        let mut patterns: Vec<Pattern> = records.keys().map(|(p, _)| p.clone()).collect();
        patterns.dedup();
        let mut variants: Vec<Variant> = records.keys().map(|(_, v)| *v).collect();
        variants.sort();
        variants.dedup();
        let reference = records.values().next().map(|r| r.subjects.clone()).unwrap_or_default();
        for ((p, v), r) in &records {
            if r.subjects != reference || r.dice.len() != reference.len() || r.asd.len() != reference.len() {
                return Err(PimmsError::invalid(format!(
                    "subject list of {v} on pattern {} does not match the other cells",
                    p.bits()
                )));
            }
        }
        let order = Pattern::all(patterns.first().map(|p| p.0.len()).unwrap_or(0));
        patterns.sort_by_key(|p| order.iter().position(|q| q == p));
        let mut cells = Vec::new();
        for p in &patterns {
            let baseline = records.get(&(p.clone(), Variant::Hemis));
            for &v in &variants {
                let Some(r) = records.get(&(p.clone(), v)) else {
                    return Err(PimmsError::invalid(format!("missing cell {v} on pattern {}", p.bits())));
                };
                let asd: Vec<f64> = r.asd.iter().flatten().copied().collect();
                let median_dice = median(&r.dice).unwrap_or(f64::NAN);
                let mut p_vs_hemis = None;
                let mut flag = false;
                if let (Some(base), true) = (baseline, v != Variant::Hemis) {
                    if let Ok(t) = wilcoxon_signed_rank(&r.dice, &base.dice) {
                        p_vs_hemis = Some(t.p);
                        let base_median = median(&base.dice).unwrap_or(f64::NAN);
                        flag = t.p < SIGNIFICANCE && median_dice > base_median;
                    }
                }
                cells.push(GridCell {
                    pattern: p.clone(),
                    variant: v,
                    records: r.clone(),
                    median_dice,
                    mean_dice: mean(&r.dice).unwrap_or(f64::NAN),
                    median_asd: median(&asd),
                    mean_asd: mean(&asd),
                    asd_excluded: r.asd.len() - asd.len(),
                    p_vs_hemis,
                    flag,
                });
            }
        }
        Ok(SubsetGrid {
            patterns,
            variants,
            cells,
        })
    }

    pub fn cell(&self, pattern: &Pattern, variant: Variant) -> Option<&GridCell> {
        self.cells.iter().find(|c| &c.pattern == pattern && c.variant == variant)
    }

    pub const CSV_HEADER: &'static str = "pattern,variant,n,median_dice,mean_asd,p_vs_hemis,flag";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.pattern.bits(),
                c.variant,
                c.records.dice.len(),
                c.median_dice,
                opt(c.mean_asd),
                opt(c.p_vs_hemis),
                if c.p_vs_hemis.is_some() { c.flag.to_string() } else { String::new() }
            );
        }
        out
    }

    /// Plain-text table: one row per pattern, Dice and distance per variant.
    /// Flagged cells carry a `*`.
    pub fn render_table(&self) -> String {
        let m = self.patterns.first().map(|p| p.0.len()).unwrap_or(0);
        let significance = self.variants.contains(&Variant::Hemis) && self.variants.len() > 1;
        let mut out = String::new();
        let head: Vec<String> = (0..m).map(modality_name).collect();
        let _ = write!(out, "{:<w$}", head.join(" "), w = 3 * m + 4);
        for v in &self.variants {
            let _ = write!(out, " | {:^35}", v.as_str());
        }
        out.push('\n');
        let _ = write!(out, "{:<w$}", "", w = 3 * m + 4);
        for _ in &self.variants {
            let _ = write!(out, " | {:>8} {:>8} {:>8} {:>8} ", "Dice med", "mean", "ASD med", "mean");
        }
        out.push('\n');
        let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        for p in &self.patterns {
            let marks: Vec<String> = p.dots().chars().map(|c| format!("{c:^w$}", w = 2)).collect();
            let _ = write!(out, "{:<w$}", marks.join(" "), w = 3 * m + 4);
            for &v in &self.variants {
                let c = self.cell(p, v).expect("complete grid");
                let star = if significance && c.flag { "*" } else { " " };
                let _ = write!(
                    out,
                    " | {:>7}{} {:>8} {:>8} {:>8} ",
                    format!("{:.3}", c.median_dice),
                    star,
                    format!("{:.3}", c.mean_dice),
                    f(c.median_asd),
                    f(c.mean_asd)
                );
            }
            out.push('\n');
        }
        if significance {
            let _ = writeln!(out, "* median Dice above hemis, Wilcoxon p < {SIGNIFICANCE}");
        }
        out
    }
}

/// Dice and distance of one prediction against its ground truth.
pub fn score_prediction(pred: &Tensor, gt: &Tensor, spacing: f64) -> Result<(f64, Option<f64>)> {
    let dice = dice_score(pred, gt)?;
    let asd = match avg_symmetric_distance(pred, gt, spacing) {
        Ok(d) => Some(d),
        Err(PimmsError::Statistics(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((dice, asd))
}

/// Run every model on every availability pattern of every subject. Absent
/// modalities are removed from the scan set; subjects are processed in id
/// order so the result does not depend on the order given.
pub fn evaluate_subsets(models: &[Model], samples: &[PhantomSample], threads: usize) -> Result<SubsetGrid> {
    let first = models
        .first()
        .ok_or_else(|| PimmsError::invalid("no models to evaluate"))?;
    let m = first.config.modalities();
    if models.iter().any(|x| x.config.modalities() != m) {
        return Err(PimmsError::invalid("models disagree on the modality count"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for x in models {
        if !seen.insert(x.variant) {
            return Err(PimmsError::invalid(format!("two checkpoints for variant {}", x.variant)));
        }
    }
    let mut subjects: Vec<&PhantomSample> = samples.iter().collect();
    subjects.sort_by(|a, b| a.id.cmp(&b.id));
    for w in subjects.windows(2) {
        if w[0].id == w[1].id {
            return Err(PimmsError::invalid(format!("duplicate subject id `{}`", w[0].id)));
        }
    }
    let patterns = Pattern::all(m);
    let jobs: Vec<(usize, usize)> = (0..subjects.len())
        .flat_map(|s| (0..patterns.len()).map(move |p| (s, p)))
        .collect();
    let results = parallel::map(&jobs, threads, |&(s, p)| -> Result<Vec<(f64, Option<f64>)>> {
        let sample = subjects[s];
        let (scans, labels) = sample.with_modalities(&patterns[p].0);
        let set = ScanSet::new(scans)?;
        models
            .iter()
            .map(|model| {
                let pred = match model.variant {
                    Variant::Hemis => model.predict(&set, Some(&labels))?,
                    _ => model.predict(&set, None)?,
                };
                score_prediction(&pred.mask(), &sample.mask, 1.0)
            })
            .collect()
    });
    let mut records: BTreeMap<(Pattern, Variant), CellRecords> = BTreeMap::new();
    for ((s, p), res) in jobs.iter().zip(results) {
        for (model, (dice, asd)) in models.iter().zip(res?) {
            let cell = records
                .entry((patterns[*p].clone(), model.variant))
                .or_insert_with(|| CellRecords {
                    subjects: Vec::new(),
                    dice: Vec::new(),
                    asd: Vec::new(),
                });
            cell.subjects.push(subjects[*s].id.clone());
            cell.dice.push(dice);
            cell.asd.push(asd);
        }
    }
    SubsetGrid::from_records(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Tensor {
        let mut t = Tensor::zeros(&[h, w]);
        for &(y, x) in on {
            t.data_mut()[y * w + x] = 1.0;
        }
        t
    }

    #[test]
    fn dice_cases() {
        let a = mask(4, 4, &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let b = mask(4, 4, &[(3, 3)]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        let z = Tensor::zeros(&[4, 4]);
        assert_eq!(dice_score(&z, &z).unwrap(), 1.0);
        let p = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let g = mask(4, 4, &[(0, 1), (0, 2), (0, 3), (1, 0), (1, 1), (1, 2)]);
        assert!((dice_score(&p, &g).unwrap() - 0.6).abs() < 1e-15);
        assert!(dice_score(&p, &Tensor::zeros(&[3, 4])).is_err());
    }

    #[test]
    fn parallel_segments_three_apart() {
        let a = mask(8, 8, &(0..8).map(|x| (1, x)).collect::<Vec<_>>());
        let b = mask(8, 8, &(0..8).map(|x| (4, x)).collect::<Vec<_>>());
        assert_eq!(avg_symmetric_distance(&a, &b, 1.0).unwrap(), 3.0);
        assert_eq!(avg_symmetric_distance(&a, &b, 0.5).unwrap(), 1.5);
        assert_eq!(avg_symmetric_distance(&a, &a, 1.0).unwrap(), 0.0);
        assert!(avg_symmetric_distance(&a, &Tensor::zeros(&[8, 8]), 1.0).is_err());
    }

    #[test]
    fn boundary_excludes_interior() {
        let full = Tensor::ones(&[3, 3]);
        assert_eq!(boundary(&full).unwrap().len(), 8);
        let big = Tensor::from_fn(&[5, 5], |i| if (1..4).contains(&(i / 5)) && (1..4).contains(&(i % 5)) { 1.0 } else { 0.0 });
        assert!(!boundary(&big).unwrap().contains(&(2, 2)));
    }

    #[test]
    fn wilcoxon_constant_shift() {
        let a: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.5).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.w, 0.0);
        assert!(r.exact);
        assert!((r.p - 2.0 / 1024.0).abs() < 1e-15);
        assert!(wilcoxon_signed_rank(&a, &a).is_err());
    }

    #[test]
    fn wilcoxon_normal_regime_is_sane() {
        let a: Vec<f64> = (0..40).map(|i| (i as f64 * 1.3).sin()).collect();
        let b: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).cos()).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(!r.exact);
        assert!((0.0..=1.0).contains(&r.p));
        assert_eq!(r.w_plus + r.w_minus, 820.0);
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn seven_patterns_for_three_modalities() {
        let p = Pattern::all(3);
        assert_eq!(p.len(), 7);
        assert_eq!(p[0].bits(), "100");
        assert_eq!(p[6].bits(), "111");
        assert_eq!(p[2].names(), "FLAIR");
        assert_eq!(Pattern::parse_bits("011").unwrap().dots(), "◦••");
        assert!(Pattern::parse_bits("000").is_err());
    }

    #[test]
    fn mismatched_subjects_are_rejected() {
        let p = Pattern(vec![true]);
        let cell = |ids: &[&str]| CellRecords {
            subjects: ids.iter().map(|s| s.to_string()).collect(),
            dice: vec![1.0; ids.len()],
            asd: vec![None; ids.len()],
        };
        let mut r = BTreeMap::new();
        r.insert((p.clone(), Variant::Hemis), cell(&["a", "b"]));
        r.insert((p.clone(), Variant::Soft), cell(&["b", "a"]));
        assert!(SubsetGrid::from_records(r).is_err());
    }
}
