//! Central-difference verification of tape gradients in double precision.
//!
//! For each checked input entry the function is re-evaluated at `x ± h`
//! on decision-tracking tapes. When either evaluation takes a different
//! discrete branch than the unperturbed one (an activation flips sign, an
//! argmax moves, a sample crosses a texel edge) the function is not
//! differentiable along that step and the entry is counted as skipped
//! rather than compared.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub rel_tol: f64,
    /// Absolute error always accepted; covers gradients at the round-off
    /// level of the difference quotient.
    pub abs_floor: f64,
    /// Entries sampled per input (the largest-gradient entry is always
    /// one of them). `None` checks every entry.
    pub entries_per_input: Option<usize>,
    /// When positive, the absolute floor is raised to this many units of
    /// round-off in `f` divided by the step: `ulps * eps * |f| / step`.
    /// Large sums of many terms need it; a gradient error shows up as a
    /// mismatch that does not shrink when the step grows.
    pub roundoff_ulps: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            entries_per_input: None,
            roundoff_ulps: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EntryMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_at_kinks: usize,
    pub max_rel_err: f64,
    pub failures: Vec<EntryMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped_at_kinks += other.skipped_at_kinks;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, u64)>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::with_decision_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&tape, &vars)?;
    Ok((tape.value(out).item(), tape.fingerprint()))
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences for every input.
pub fn check<F, R>(
    f: F,
    inputs: &[Tensor<f64>],
    config: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng,
{
    let tape = Tape::with_decision_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    let base_fp = tape.fingerprint();
    let f0 = tape.value(out).item();
    let abs_floor = config
        .abs_floor
        .max(config.roundoff_ulps * f64::EPSILON * f0.abs() / config.step);
    let grads = tape.backward(out)?;
    drop(tape);

    let mut report = GradCheckReport::default();
    for (input, value) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[input]);
        let n = value.numel();
        let entries: Vec<usize> = match config.entries_per_input {
            Some(k) if k < n => {
                let largest = (0..n)
                    .max_by(|&a, &b| {
                        analytic.data()[a]
                            .abs()
                            .total_cmp(&analytic.data()[b].abs())
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                let mut picked = vec![largest];
                for i in sample(rng, n, k.min(n)).into_iter() {
                    if picked.len() == k {
                        break;
                    }
                    if i != largest {
                        picked.push(i);
                    }
                }
                picked
            }
            _ => (0..n).collect(),
        };
        for index in entries {
            let perturbed = |delta: f64| -> Result<(f64, u64)> {
                let mut data = value.to_vec();
                data[index] += delta;
                let mut xs = inputs.to_vec();
                xs[input] = Tensor::new(value.shape().clone(), data)?;
                eval(&f, &xs)
            };
            let (fp, hp) = perturbed(config.step)?;
            let (fm, hm) = perturbed(-config.step)?;
            if hp != base_fp || hm != base_fp {
                report.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * config.step);
            let a = analytic.data()[index];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs()).max(abs_floor / config.rel_tol);
            let rel = err / scale;
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if !(rel < config.rel_tol) {
                report.failures.push(EntryMismatch {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    Ok(report)
}

/// Reduces any output to a scalar through fixed weights so every output
/// entry contributes to the checked gradient.
pub fn project<T: Real>(tape: &Tape<T>, y: Var, weights: &[T]) -> Result<Var> {
    tape.weighted_sum(y, weights)
}
