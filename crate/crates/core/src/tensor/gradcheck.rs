use super::{Fault, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn tape_for(fault: Option<Fault>) -> Tape<f64> {
    match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    }
}

fn eval<F>(f: &F, x: &Tensor<f64>, fault: Option<Fault>) -> Result<f64>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = tape_for(fault);
    let v = tape.constant(x.clone());
    f(v)?.item()
}

/// Checks `d fn / d x` from the tape against `(f(x+ε) − f(x−ε)) / 2ε`.
///
/// The relative error per element is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    grad_check_with(None, f, x, eps)
}

#[doc(hidden)]
pub fn grad_check_with<F>(
    fault: Option<Fault>,
    f: F,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Contract(format!(
            "grad_check step must be positive, got {eps}"
        )));
    }
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("input element {i}"),
            value: x.data()[i],
        });
    }

    let tape = tape_for(fault);
    let xv = tape.param("x", x.clone());
    let loss = f(xv)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            location: "loss at the unperturbed input".into(),
            value,
        });
    }
    tape.backward(loss)?;
    let analytic = xv.grad().expect("param grad").to_f64_vec();

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&f, &probe, fault)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&f, &probe, fault)?;
        probe.data_mut()[i] = orig;
        for (side, v) in [("+", plus), ("-", minus)] {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("loss with element {i} perturbed by {side}eps"),
                    value: v,
                });
            }
        }
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let mut max_rel_err = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        if !a.is_finite() {
            return Err(Error::NonFinite {
                location: format!("analytic gradient element {i}"),
                value: a,
            });
        }
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let r = grad_check(|v| Ok(v.square().sum()), &x, 1e-4).unwrap();
        assert!(r.max_rel_err < 1e-8, "{}", r.max_rel_err);
    }

    #[test]
    fn non_finite_value_names_the_coordinate() {
        let x = Tensor::new(&[2], vec![1.0, 1e-5]).unwrap();
        // ln of a negative number once element 1 is pushed below zero.
        let err = grad_check(|v| Ok(v.ln().sum()), &x, 1e-4).unwrap_err();
        match err {
            Error::NonFinite { location, .. } => {
                assert!(location.contains("element 1"), "{location}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_relu_rule_is_detected() {
        let x = Tensor::new(&[3], vec![0.5, 1.5, -2.0]).unwrap();
        fn f(v: Var<'_, f64>) -> Result<Var<'_, f64>> {
            Ok(v.relu().square().sum())
        }
        let clean = grad_check(f, &x, 1e-4).unwrap();
        assert!(clean.max_rel_err < 1e-8);
        let bad = grad_check_with(Some(Fault::ScaleReluGrad(1.1)), f, &x, 1e-4).unwrap();
        assert!(bad.max_rel_err > 1e-3);
    }
}
