//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{GltError, Result};
use crate::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_elements_per_input: Option<usize>,
    pub seed: u64,
    /// Multiplies every analytic gradient before comparison. Only a fault
    /// injection hook; leave at 1.
    pub analytic_scale: f64,
    /// A coordinate whose error exceeds this is differenced again with a
    /// step ten times smaller and keeps the better of the two: a ReLU or
    /// max-pool switch within `step` of the point breaks the first
    /// difference but not the gradient.
    pub retry_above: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_elements_per_input: None,
            seed: 0,
            analytic_scale: 1.0,
            retry_above: Some(1e-6),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_parameter_errors: Vec<(String, f64)>,
    /// Inputs whose analytic or numeric gradient contained NaN/Inf.
    pub non_finite: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_empty() && self.max_relative_error < tolerance
    }

    /// Folds another report in, prefixing its parameter names.
    pub fn merge(&mut self, prefix: &str, other: GradCheckReport) {
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.per_parameter_errors.extend(
            other
                .per_parameter_errors
                .into_iter()
                .map(|(n, e)| (format!("{prefix}{n}"), e)),
        );
        self.non_finite
            .extend(other.non_finite.into_iter().map(|n| format!("{prefix}{n}")));
    }

    pub fn empty() -> Self {
        GradCheckReport {
            max_relative_error: 0.0,
            per_parameter_errors: Vec::new(),
            non_finite: Vec::new(),
        }
    }
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences at the given named inputs.
pub fn gradcheck<F>(inputs: &[(String, Tensor<f64>)], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(_, t)| tape.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::empty();
    for (slot, ((name, t), &v)) in inputs.iter().zip(&vars).enumerate() {
        let n = t.numel();
        let analytic: Vec<f64> = match tape.grad(v) {
            Some(g) => g.iter().map(|&x| x * opts.analytic_scale).collect(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match opts.max_elements_per_input {
            Some(cap) if cap < n => {
                let mut c = sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        let mut bad = false;
        for j in coords {
            let mut central = |h: f64| -> Result<f64> {
                let orig = values[slot].data()[j];
                values[slot].data_mut()[j] = orig + h;
                let fp = eval(&values)?;
                values[slot].data_mut()[j] = orig - h;
                let fm = eval(&values)?;
                values[slot].data_mut()[j] = orig;
                Ok((fp - fm) / (2.0 * h))
            };
            let numeric = central(opts.step)?;
            let a = analytic[j];
            if !a.is_finite() || !numeric.is_finite() {
                bad = true;
                continue;
            }
            let mut err = relative_error(a, numeric);
            if opts.retry_above.is_some_and(|t| err > t) {
                let fine = central(opts.step / 10.0)?;
                if fine.is_finite() {
                    err = err.min(relative_error(a, fine));
                }
            }
            worst = worst.max(err);
        }
        if bad {
            report.non_finite.push(name.clone());
            worst = f64::INFINITY;
        }
        report.max_relative_error = report.max_relative_error.max(worst);
        report.per_parameter_errors.push((name.clone(), worst));
    }
    Ok(report)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    match tape.value(v) {
        [x] => Ok(*x),
        other => Err(GltError::Contract(format!(
            "gradcheck needs a scalar function, got {} values",
            other.len()
        ))),
    }
}
