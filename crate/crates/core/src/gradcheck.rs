//! Central-difference verification of analytic gradients.

use crate::autodiff::{Gradients, ParamSet};
use crate::error::{Error, Result};

/// Step used throughout the test suite and the CLI.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Acceptance threshold on the relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(1, |numeric|)` over all entries.
    pub max_relative_error: f64,
    /// Parameter and flat index where the maximum occurred.
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares `analytic` against `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` for every
/// scalar entry of every parameter in `params`.
///
/// A parameter missing from `analytic` is treated as having zero gradient.
pub fn grad_check<F>(params: &ParamSet, analytic: &Gradients, step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let base = params.get(name).expect("name taken from params").clone();
        let grad = analytic.get(name);
        if let Some(g) = grad {
            if g.shape() != base.shape() {
                return Err(Error::dim("grad_check", base.shape(), g.shape()));
            }
        }
        for i in 0..base.numel() {
            let orig = base.data()[i];
            let mut eval = |x: f64, probe: &mut ParamSet| -> Result<f64> {
                probe.get_mut(name).expect("probe mirrors params").data_mut()[i] = x;
                let v = f(probe)?;
                if !v.is_finite() {
                    return Err(Error::Evaluation {
                        param: name.clone(),
                        index: i,
                    });
                }
                Ok(v)
            };
            let plus = eval(orig + step, &mut probe)?;
            let minus = eval(orig - step, &mut probe)?;
            probe.get_mut(name).expect("probe mirrors params").data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if rel > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradientTape;
    use crate::tensor::Tensor;

    fn single(name: &str, t: Tensor) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, t);
        p
    }

    #[test]
    fn quadratic() {
        let params = single("theta", Tensor::scalar(3.0));
        let mut grads = Gradients::new();
        grads.insert("theta", Tensor::scalar(6.0));
        let report = grad_check(&params, &grads, 1e-5, |p| {
            let x = p.get("theta").unwrap().data()[0];
            Ok(x * x)
        })
        .unwrap();
        assert!((report.numeric - 6.0).abs() < 1e-8);
        assert!(report.max_relative_error < 1e-8);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let theta = Tensor::new(&[2, 3], vec![0.1, -0.4, 0.3, 1.2, 0.0, -0.7]).unwrap();
        let params = single("theta", theta);
        let loss = |p: &ParamSet| -> Result<(f64, Gradients)> {
            let mut tape = GradientTape::new();
            let x = tape.param("theta", p.get("theta").unwrap());
            let s = tape.softmax_rows(x)?;
            let total = tape.sum_all(s);
            Ok((tape.value(total).data()[0], tape.backward(total)?))
        };
        let (_, grads) = loss(&params).unwrap();
        assert!(grads.get("theta").unwrap().data().iter().all(|g| g.abs() < 1e-15));
        let report = grad_check(&params, &grads, 1e-5, |p| loss(p).map(|r| r.0)).unwrap();
        assert!(report.max_relative_error < 1e-9);
    }

    #[test]
    fn detects_wrong_gradient() {
        let params = single("theta", Tensor::scalar(3.0));
        let mut grads = Gradients::new();
        grads.insert("theta", Tensor::scalar(5.0));
        let report = grad_check(&params, &grads, 1e-5, |p| Ok(p.get("theta").unwrap().data()[0].powi(2))).unwrap();
        assert!(!report.passes(DEFAULT_TOLERANCE));
        assert_eq!(report.worst_param, "theta");
    }

    #[test]
    fn non_finite_objective_names_the_parameter() {
        let params = single("w", Tensor::vector(vec![1.0, 0.0]));
        let err = grad_check(&params, &Gradients::new(), 1e-5, |p| {
            let w = p.get("w").unwrap().data();
            Ok(if w[1] != 0.0 { f64::NAN } else { w[0] })
        })
        .unwrap_err();
        match err {
            Error::Evaluation { param, index } => assert_eq!((param.as_str(), index), ("w", 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_nonpositive_step() {
        let params = single("w", Tensor::scalar(1.0));
        assert!(grad_check(&params, &Gradients::new(), 0.0, |_| Ok(0.0)).is_err());
    }
}
