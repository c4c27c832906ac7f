//! Analytic-vs-central-difference gradient verification in f64.

use serde::Serialize;

use crate::error::Result;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Denominator floor for the relative error, so that gradients which are
/// zero up to finite-difference noise do not divide by ~0.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradInput {
    pub name: String,
    pub value: Tensor<f64>,
    pub frozen: bool,
}

impl GradInput {
    pub fn new(name: impl Into<String>, value: Tensor<f64>) -> Self {
        Self {
            name: name.into(),
            value,
            frozen: false,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<f64>) -> Self {
        Self {
            name: name.into(),
            value,
            frozen: true,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub excluded: Vec<String>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub diagnostic: Option<String>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare analytic gradients of the scalar `f` against central differences
/// with step `h` for every non-frozen input element.
pub fn grad_check<F>(f: F, inputs: &[GradInput], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Graph<f64>, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|(inp, v)| g.leaf(v.clone(), with_grad && !inp.frozen))
            .collect();
        let out = f(&mut g, &vars)?;
        let y = g.value(out).item();
        if with_grad {
            g.backward(out)?;
        }
        Ok((y, g, vars))
    };

    let base: Vec<Tensor<f64>> = inputs.iter().map(|i| i.value.clone()).collect();
    let (y0, g, vars) = eval(&base, true)?;
    let excluded: Vec<String> = inputs
        .iter()
        .filter(|i| i.frozen)
        .map(|i| i.name.clone())
        .collect();
    let mut report = GradCheckReport {
        entries: Vec::new(),
        excluded,
        max_rel_err: 0.0,
        tolerance: tol,
        passed: true,
        diagnostic: None,
    };
    if !y0.is_finite() {
        report.passed = false;
        report.diagnostic = Some(format!("non-finite function value {y0}"));
        return Ok(report);
    }

    let mut values = base;
    for (slot, inp) in inputs.iter().enumerate() {
        if inp.frozen {
            continue;
        }
        let n = inp.value.numel();
        let analytic: Vec<f64> = g
            .grad(vars[slot])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let mut entry = GradCheckEntry {
            name: inp.name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let orig = values[slot].data()[i];
            values[slot].data_mut()[i] = orig + h;
            let (yp, _, _) = eval(&values, false)?;
            values[slot].data_mut()[i] = orig - h;
            let (ym, _, _) = eval(&values, false)?;
            values[slot].data_mut()[i] = orig;
            let numeric = (yp - ym) / (2.0 * h);
            let a = analytic[i];
            if !numeric.is_finite() || !a.is_finite() {
                report.passed = false;
                report.diagnostic = Some(format!(
                    "non-finite gradient for {}[{i}]: analytic {a}, numeric {numeric}",
                    inp.name
                ));
                return Ok(report);
            }
            let err = relative_error(a, numeric);
            if err > entry.max_rel_err || i == 0 {
                entry.max_rel_err = err;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.max_rel_err = report.max_rel_err.max(entry.max_rel_err);
        report.entries.push(entry);
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = Tensor::from_f64(vec![3], &[0.1, -2.0, 5.0]).unwrap();
        let report = grad_check(
            |g, v| Ok(g.sum(v[0])),
            &[GradInput::new("x", x)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn frozen_input_is_excluded() {
        let x = Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let w = Tensor::from_f64(vec![2], &[3.0, 4.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let p = g.mul(v[0], v[1])?;
                Ok(g.sum(p))
            },
            &[GradInput::new("x", x), GradInput::frozen("w", w)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.excluded, vec!["w".to_string()]);
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].name, "x");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // log(1+e^x) evaluated through a custom non-differentiable detour:
        // the analytic path sees a constant, so the check must fail.
        let x = Tensor::from_f64(vec![1], &[0.7]).unwrap();
        let report = grad_check(
            |g, v| {
                let val = g.value(v[0]).data()[0];
                let c = g.constant(Tensor::scalar(val * val));
                let s = g.sum(v[0]);
                let c = g.reshape(c, &[])?;
                g.add(s, c)
            },
            &[GradInput::new("x", x)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_finite_values_fail_with_diagnostic() {
        let x = Tensor::from_f64(vec![1], &[f64::NAN]).unwrap();
        let report = grad_check(
            |g, v| Ok(g.sum(v[0])),
            &[GradInput::new("x", x)],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.diagnostic.is_some());
    }
}
