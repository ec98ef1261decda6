//! Central finite-difference gradient checking.
//!
//! Relative error per coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`,
//! i.e. absolute error for gradients below one and relative above.

use super::{Array, Graph, ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares a supplied gradient against central differences of `value`.
///
/// `coords` restricts the comparison to a subset of flat indices; `None`
/// checks every coordinate.
pub fn compare_gradient<V, G>(
    value: V,
    gradient: G,
    point: &Array,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    V: Fn(&Array) -> Result<f64>,
    G: Fn(&Array) -> Result<Array>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Contract(format!("grad_check eps must be positive, got {eps}")));
    }
    let analytic = gradient(point)?;
    if analytic.shape() != point.shape() {
        return Err(Error::Dimension {
            op: "grad_check",
            lhs: point.shape().to_vec(),
            rhs: analytic.shape().to_vec(),
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = point.clone();
    for &i in coords {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = value(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = value(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!(
                "function is not finite at coordinate {i} perturbed by ±{eps}"
            )));
        }
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || (i == coords[0] && report.max_rel_error == 0.0) {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Evaluates a tape-recorded scalar function at `point`.
pub fn evaluate<F>(f: &F, point: &Array) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    tape.value(y).item()
}

/// Reverse-mode gradient of a tape-recorded scalar function at `point`.
pub fn gradient<F>(f: &F, point: &Array) -> Result<Array>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let grads = tape.backward(y)?;
    Ok(grads.get_or_zeros(x, point))
}

/// Checks the tape gradient of `f` at `point` against central differences.
pub fn grad_check<F>(f: F, point: &Array, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    compare_gradient(|p| evaluate(&f, p), |p| gradient(&f, p), point, eps, None)
}

/// Like [`grad_check`] but only over the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, point: &Array, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    compare_gradient(|p| evaluate(&f, p), |p| gradient(&f, p), point, eps, Some(coords))
}

/// Checks the gradient of a graph-recorded scalar with respect to parameter
/// `name` of `params`, optionally over a subset of its flat coordinates.
pub fn grad_check_param<F>(
    params: &ParamStore,
    name: &str,
    eps: f64,
    coords: Option<&[usize]>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let with = |p: &Array| -> Result<ParamStore> {
        let mut store = params.clone();
        store.set(name, p.clone())?;
        Ok(store)
    };
    let value = |p: &Array| {
        let store = with(p)?;
        let mut g = Graph::new(&store);
        let y = f(&mut g)?;
        g.value(y).item()
    };
    let gradient = |p: &Array| {
        let store = with(p)?;
        let mut g = Graph::new(&store);
        let y = f(&mut g)?;
        let grads = g.backward(y)?;
        let by_name = g.param_grads(&grads);
        Ok(by_name.get(name).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
    };
    compare_gradient(value, gradient, params.get(name)?, eps, coords)
}

/// Checks the reverse sweep of an already recorded tape: the numeric side
/// replays the recorded operations with `input` perturbed.
pub fn grad_check_recorded(
    tape: &Tape,
    input: Var,
    output: Var,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let point = tape.value(input).clone();
    let value = |p: &Array| tape.replay_with(&[(input, p)])?[output.index()].item();
    let gradient = |p: &Array| Ok(tape.backward(output)?.get_or_zeros(input, p));
    compare_gradient(value, gradient, &point, eps, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |t: &mut Tape, x: Var| {
            let s = t.square(x)?;
            let s = t.scale(s, 3.0)?;
            let lin = t.scale(x, -2.0)?;
            let y = t.add(s, lin)?;
            t.sum(y)
        };
        let p = Array::vector(&[0.3, -0.7, 0.4]);
        let r = grad_check(f, &p, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let value = |p: &Array| Ok(p.data().iter().map(|v| v * v).sum::<f64>());
        let bad = |p: &Array| {
            let mut g = p.map(|v| 2.0 * v);
            g.data_mut()[1] += 0.5;
            Ok(g)
        };
        let p = Array::vector(&[1.0, 2.0, 3.0]);
        let r = compare_gradient(value, bad, &p, DEFAULT_EPS, None).unwrap();
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn non_finite_perturbation_is_an_evaluation_error() {
        let f = |t: &mut Tape, x: Var| {
            let l = t.log(x)?;
            t.sum(l)
        };
        let p = Array::vector(&[0.0]);
        assert!(matches!(grad_check(f, &p, 1e-6), Err(Error::Evaluation(_))));
    }

    #[test]
    fn bad_eps_rejected() {
        let f = |t: &mut Tape, x: Var| t.sum(x);
        assert!(grad_check(f, &Array::vector(&[1.0]), 0.0).is_err());
    }
}
