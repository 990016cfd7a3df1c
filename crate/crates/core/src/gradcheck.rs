//! Central finite-difference checks of recorded gradients.
//!
//! Coordinates whose perturbation changes a non-smooth branch (a ReLU sign,
//! a pooling argmax, a log clamp) are reported as skipped rather than
//! compared, since the two-sided difference straddles a kink there.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Base step; the step for coordinate `x` is `step * max(1, |x|)`.
    pub step: f64,
    /// Coordinates whose branch pattern changes within `dead_zone` steps are skipped.
    pub dead_zone: f64,
    /// Smallest denominator used for the relative error.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            dead_zone: 10.0,
            floor: 1e-4,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: Vec<(usize, usize)>,
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped.extend(other.skipped);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

struct Probe {
    value: f64,
    signature: u64,
}

fn probe<F>(inputs: &[Tensor], f: &F) -> Result<Probe>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(Probe {
        value: tape.value(out).item(),
        signature: tape.kink_signature(),
    })
}

/// Compare the recorded gradient of the scalar built by `f` against central
/// differences, for every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let base_signature = tape.kink_signature();
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport::default();
    let mut point = inputs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for index in 0..grad.len() {
            let x0 = inputs[input].data()[index];
            let h = cfg.step * x0.abs().max(1.0);
            let mut eval = |x: f64| -> Result<Probe> {
                point[input].data_mut()[index] = x;
                let p = probe(&point, &f);
                point[input].data_mut()[index] = x0;
                p
            };
            let wide_plus = eval(x0 + cfg.dead_zone * h)?;
            let wide_minus = eval(x0 - cfg.dead_zone * h)?;
            let plus = eval(x0 + h)?;
            let minus = eval(x0 - h)?;
            let crosses = [&wide_plus, &wide_minus, &plus, &minus]
                .iter()
                .any(|p| p.signature != base_signature);
            if crosses {
                report.skipped.push((input, index));
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * h);
            let a = grad.data()[index];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if rel_err >= cfg.tolerance {
                report.failures.push(GradCheckEntry {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(report)
}
