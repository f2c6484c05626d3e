use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Relative error used throughout: `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Numerical differentiation rule used as the reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Difference {
    /// `(f(x+h) − f(x−h)) / 2h`.
    Central(f64),
    /// Richardson extrapolation of two central differences, `(4·D(h/2) − D(h)) / 3`.
    /// Fourth-order accurate, so larger steps stay accurate and rounding noise
    /// in the function value matters less for tiny derivatives.
    Richardson(f64),
}

/// Checks the gradient of a scalar function of one tensor at `x`.
///
/// `f` must be deterministic; otherwise the result is meaningless.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let report =
        finite_diff_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), Difference::Central(eps), None)?;
    Ok(report.max_rel_error)
}

/// Multi-input variant. With `sample = Some((count, seed))` only `count`
/// randomly chosen entries are perturbed (tensor first, then index, both uniform);
/// otherwise every entry of every input is checked.
pub fn finite_diff_check_many<F>(
    f: F,
    inputs: &[Tensor<f64>],
    scheme: Difference,
    sample: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if inputs.is_empty() {
        return Err(Error::usage("gradient check needs at least one input"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let entries: Vec<(usize, usize)> = match sample {
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect(),
        Some((count, seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| {
                    let i = rng.random_range(0..inputs.len());
                    (i, rng.random_range(0..inputs[i].len()))
                })
                .collect()
        }
    };

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    for (i, j) in entries {
        let orig = work[i].data()[j];
        let mut central = |h: f64| -> Result<f64> {
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let numeric = match scheme {
            Difference::Central(h) => central(h)?,
            Difference::Richardson(h) => {
                let coarse = central(h)?;
                (4.0 * central(h / 2.0)? - coarse) / 3.0
            }
        };
        let err = relative_error(analytic[i].data()[j], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}
