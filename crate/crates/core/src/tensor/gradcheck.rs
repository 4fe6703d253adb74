//! Central finite-difference gradient checker.

use super::tape::{Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{contract, Result};

/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`,
/// so components that are zero up to rounding noise do not divide by ~0.
pub const GRAD_CHECK_DENOM_FLOOR: Scalar = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: Scalar,
    pub numeric: Scalar,
    pub rel_err: Scalar,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: Scalar,
    pub checked: usize,
    pub max_rel_err: Scalar,
    /// Largest relative error seen for each input.
    pub per_input_max: Vec<Scalar>,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

pub fn relative_error(analytic: Scalar, numeric: Scalar) -> Scalar {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_DENOM_FLOOR)
}

/// Compares tape gradients of the scalar function `f` against
/// `(f(x+h) - f(x-h)) / 2h` for every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: Scalar, tol: Scalar) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |values: &[Tensor]| -> Result<Scalar> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() != 1 {
            return contract(format!("grad_check needs a scalar function, got shape {:?}", v.shape()));
        }
        Ok(v.item())
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report = GradCheckReport {
        tolerance: tol,
        checked: 0,
        max_rel_err: 0.0,
        per_input_max: vec![0.0; inputs.len()],
        failures: Vec::new(),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (input, t) in inputs.iter().enumerate() {
        for index in 0..t.numel() {
            let x0 = t.data()[index];
            work[input].data_mut()[index] = x0 + h;
            let fp = eval(&work)?;
            work[input].data_mut()[index] = x0 - h;
            let fm = eval(&work)?;
            work[input].data_mut()[index] = x0;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[input].data()[index];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            report.per_input_max[input] = report.per_input_max[input].max(rel);
            if !(rel <= tol) {
                report.failures.push(GradCheckFailure {
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::linear;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[10], 1.0, &mut rng);
        let r = grad_check(|_, v| v[0].square()?.sum(), &[x], 1e-6, 1e-8).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn softmax_linear_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        let probe = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let r = grad_check(
            |tape, v| {
                let y = linear(v[0], v[1], Some(v[2]))?.softmax(1)?;
                y.mul(tape.constant(probe.clone()))?.sum()
            },
            &[x, w, b],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn reports_wrong_gradients() {
        // relu at exactly 0 has a one-sided derivative; FD sees 0.5.
        let x = Tensor::from_vec(vec![0.0]);
        let r = grad_check(|_, v| v[0].relu()?.sum(), &[x], 1e-6, 1e-5).unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures[0].index, 0);
    }
}
