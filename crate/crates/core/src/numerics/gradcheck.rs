//! Central finite-difference verification of tape gradients.

use super::tape::{BackwardFault, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-coordinate relative error over all parameters.
    pub max_rel_error: f64,
    /// Largest relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub worst: Option<WorstCoordinate>,
    pub coordinates: usize,
}

#[derive(Clone, Debug)]
pub struct WorstCoordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Configurable gradient checker.
#[derive(Clone, Debug)]
pub struct GradCheck {
    h: f64,
    fault: Option<BackwardFault>,
}

impl GradCheck {
    pub fn new(h: f64) -> Self {
        GradCheck { h, fault: None }
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: BackwardFault) -> Self {
        self.fault = Some(fault);
        self
    }

    /// Compares tape gradients of `f` against `(f(p+h) - f(p-h)) / 2h` for every
    /// coordinate of every tensor in `params`. `f` receives one leaf per parameter.
    pub fn run<F>(&self, params: &mut [Tensor], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let analytic = {
            let tape = Tape::new();
            tape.inject_fault(self.fault);
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
            let loss = f(&tape, &vars)?;
            check_finite(tape.value(loss).item()?)?;
            let grads = tape.backward(loss)?;
            vars.iter()
                .zip(params.iter())
                .map(|(&v, p)| {
                    grads
                        .get(v)
                        .map(|g| g.data().to_vec())
                        .unwrap_or_else(|| vec![0.0; p.len()])
                })
                .collect::<Vec<_>>()
        };

        let eval = |params: &[Tensor]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
            let loss = f(&tape, &vars)?;
            let v = tape.value(loss).item()?;
            check_finite(v)
        };

        let mut per_param = vec![0.0; params.len()];
        let mut worst: Option<WorstCoordinate> = None;
        let mut max_rel_error = 0.0;
        let mut coordinates = 0;
        for pi in 0..params.len() {
            for idx in 0..params[pi].len() {
                let orig = params[pi].data()[idx];
                params[pi].data_mut()[idx] = orig + self.h;
                let plus = eval(params);
                params[pi].data_mut()[idx] = orig - self.h;
                let minus = eval(params);
                params[pi].data_mut()[idx] = orig;
                let numeric = (plus? - minus?) / (2.0 * self.h);
                let a = analytic[pi][idx];
                let err = relative_error(a, numeric);
                coordinates += 1;
                if err > per_param[pi] {
                    per_param[pi] = err;
                }
                if err > max_rel_error || worst.is_none() {
                    max_rel_error = f64::max(err, max_rel_error);
                    worst = Some(WorstCoordinate {
                        param: pi,
                        index: idx,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(GradCheckReport {
            max_rel_error,
            per_param,
            worst,
            coordinates,
        })
    }
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("objective evaluated to {v}")))
    }
}

/// [`GradCheck::run`] with default settings.
pub fn finite_diff_check<F>(params: &mut [Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(h).run(params, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let mut p = vec![Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap()];
        let r = finite_diff_check(&mut p, 1e-4, |t, v| Ok(t.sum(v[0]))).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn square_at_three() {
        let mut p = vec![Tensor::scalar(3.0)];
        let r = finite_diff_check(&mut p, 1e-4, |t, v| t.mul(v[0], v[0])).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let mut p = vec![Tensor::scalar(f64::NAN)];
        let r = finite_diff_check(&mut p, 1e-4, |t, v| Ok(t.sum(v[0])));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn fault_is_detected() {
        let mut p = vec![Tensor::new([2], vec![0.3, -0.8]).unwrap()];
        let f = |t: &Tape, v: &[Var]| Ok(t.sum(t.gelu(v[0])));
        assert!(GradCheck::new(1e-4).run(&mut p, f).unwrap().max_rel_error < 1e-7);
        let bad = GradCheck::new(1e-4)
            .with_fault(BackwardFault::GeluSlope)
            .run(&mut p, f)
            .unwrap();
        assert!(bad.max_rel_error > 1e-3);
    }
}
