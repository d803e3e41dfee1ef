//! Central-difference gradient checking.

use super::{Parameterized, Tensor};
use crate::error::{Error, Result};

const DENOM_FLOOR: f64 = 1e-8;

/// Difference formula for one parameter entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(L(p+h) − L(p−h)) / 2h`.
    Central,
    /// Ridders' extrapolation: central differences at `h, h/1.4, h/1.4², …`
    /// are extrapolated to zero step in a Neville tableau, keeping the entry
    /// with the smallest error estimate. Whole training objectives need it:
    /// the loss is O(1) while some gradient entries are O(1e-8), and a single
    /// central difference at any step is swamped either by roundoff in
    /// `L(p+h) − L(p−h)` or by truncation.
    Ridders,
}

/// Starting step used with [`Stencil::Ridders`] for objective checks.
pub const OBJECTIVE_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter tensor, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Largest difference step used for the worst entry.
    pub step: f64,
    pub checked: usize,
    /// Entries whose difference step had to shrink to stay off a kink.
    pub reduced_steps: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compare the analytic parameter gradients returned by `loss` with central
/// differences `(L(p+eps) − L(p−eps)) / 2eps`, one parameter entry at a time.
pub fn finite_difference_check<M, F>(model: &mut M, loss: F, eps: f64) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: Fn(&M) -> Result<(f64, Vec<Tensor>)>,
{
    let (base, analytic) = loss(model)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss("gradient check base point".into()));
    }
    let value = |m: &M| Ok((loss(m)?.0, Vec::new()));
    finite_difference_check_piecewise(model, &analytic, value, eps, Stencil::Central)
}

/// Smallest step tried before giving up on finding a kink-free stencil.
const MIN_STEP: f64 = 1e-9;
const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_LEVELS: usize = 10;
/// Stop once the tableau diagonal moves this many times the best error.
const RIDDERS_SAFE: f64 = 2.0;

/// [`finite_difference_check`] for piecewise-smooth losses. `value` returns
/// the loss together with the smooth piece the model sits on (for ReLU
/// networks, the sign pattern of every ReLU input). When `p ± h` lands on a
/// different piece than `p`, the difference would straddle a kink and is
/// not an estimate of the derivative at `p`; the step is then divided by
/// four until both ends stay on the piece of `p`.
pub fn finite_difference_check_piecewise<M, V>(
    model: &mut M,
    analytic: &[Tensor],
    value: V,
    eps: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    M: Parameterized,
    V: Fn(&M) -> Result<(f64, Vec<bool>)>,
{
    let (base, base_regime) = value(model)?;
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss("gradient check base point".into()));
    }
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|t| t.shape().to_vec()).collect();
    if analytic.len() != shapes.len()
        || analytic
            .iter()
            .zip(&shapes)
            .any(|(g, s)| g.shape() != s.as_slice())
    {
        return Err(Error::ShapeMismatch(
            "analytic gradients do not mirror the parameters".into(),
        ));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        step: eps,
        checked: 0,
        reduced_steps: 0,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = model.params()[pi].data()[j];
            // central difference at step h, and whether it stayed on one piece
            let mut central = |h: f64| -> Result<(f64, bool)> {
                let mut ends = [0.0; 2];
                let mut same = true;
                for (end, value_at) in ends.iter_mut().zip([orig + h, orig - h]) {
                    model.params_mut()[pi].data_mut()[j] = value_at;
                    let out = value(model);
                    model.params_mut()[pi].data_mut()[j] = orig;
                    let (l, r) = out?;
                    if !l.is_finite() {
                        return Err(Error::NonFiniteLoss(format!("parameter {pi}[{j}] ± {h}")));
                    }
                    *end = l;
                    same &= r == base_regime;
                }
                Ok(((ends[0] - ends[1]) / (2.0 * h), same))
            };
            let mut step = eps;
            let first = loop {
                let (d, same) = central(step)?;
                if same || step / 4.0 < MIN_STEP {
                    break d;
                }
                step /= 4.0;
            };
            if step < eps {
                report.reduced_steps += 1;
            }
            let numeric = match stencil {
                Stencil::Central => first,
                Stencil::Ridders => ridders(first, step, &mut central)?,
            };
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, j);
                report.analytic = a;
                report.numeric = numeric;
                report.step = step;
            }
        }
    }
    Ok(report)
}

/// Ridders' tableau seeded with the central difference `first` at step `h`.
/// A level whose stencil leaves the base piece ends the tableau.
fn ridders(
    first: f64,
    mut h: f64,
    central: &mut impl FnMut(f64) -> Result<(f64, bool)>,
) -> Result<f64> {
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut prev = vec![first];
    let (mut best, mut best_err) = (first, f64::INFINITY);
    for _ in 1..RIDDERS_LEVELS {
        h /= RIDDERS_SHRINK;
        if h < MIN_STEP {
            break;
        }
        let (d, same) = central(h)?;
        if !same {
            break;
        }
        let mut row = vec![d];
        let mut fac = c2;
        for k in 1..=prev.len() {
            let next = (row[k - 1] * fac - prev[k - 1]) / (fac - 1.0);
            fac *= c2;
            let err = (next - row[k - 1]).abs().max((next - prev[k - 1]).abs());
            if err <= best_err {
                best_err = err;
                best = next;
            }
            row.push(next);
        }
        let drift = (row[row.len() - 1] - prev[prev.len() - 1]).abs();
        prev = row;
        if drift >= RIDDERS_SAFE * best_err {
            break;
        }
    }
    Ok(best)
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn numeric_gradient<F>(f: F, point: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + eps;
            let plus = f(&x);
            x[i] = point[i] - eps;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert_eq!(relative_error(1e-10, 0.0), 1e-10 / 1e-8);
    }

    #[derive(Debug)]
    struct Scalar(Tensor);

    impl Parameterized for Scalar {
        fn named_params(&self) -> Vec<(String, &Tensor)> {
            vec![("p".into(), &self.0)]
        }

        fn params_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn kink_inside_stencil_shrinks_step() {
        // |p| near p = 3e-6: the ±1e-5 stencil straddles the kink at 0
        let mut m = Scalar(Tensor::from_vec(vec![1], vec![3e-6]).unwrap());
        let loss = |m: &Scalar| {
            let p = m.0.data()[0];
            Ok((p.abs(), vec![Tensor::from_vec(vec![1], vec![p.signum()])?]))
        };
        let plain = finite_difference_check(&mut m, loss, 1e-5).unwrap();
        assert!(plain.max_rel_error > 0.5);
        let value = |m: &Scalar| {
            let p = m.0.data()[0];
            Ok((p.abs(), vec![p > 0.0]))
        };
        let grads = [Tensor::from_vec(vec![1], vec![1.0]).unwrap()];
        let r = finite_difference_check_piecewise(&mut m, &grads, value, 1e-5, Stencil::Central)
            .unwrap();
        assert_eq!(r.reduced_steps, 1);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn ridders_beats_roundoff_on_tiny_slope() {
        // O(1) loss with a 1e-8 slope: every single central step is off by
        // far more than 1e-5 relative, the extrapolated tableau is not
        let f = |p: f64| 1.0 + 1e-8 * (3.0 * p).sin();
        let mut m = Scalar(Tensor::from_vec(vec![1], vec![0.3]).unwrap());
        let grads = [Tensor::from_vec(vec![1], vec![3e-8 * (0.9f64).cos()]).unwrap()];
        let value = |m: &Scalar| Ok((f(m.0.data()[0]), Vec::new()));
        let c = finite_difference_check_piecewise(&mut m, &grads, value, 1e-2, Stencil::Central)
            .unwrap();
        assert!(c.max_rel_error > 1e-5);
        let r = finite_difference_check_piecewise(&mut m, &grads, value, 1e-2, Stencil::Ridders)
            .unwrap();
        assert!(r.max_rel_error < 5e-6, "{r:?}");
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(|v| v[0] * v[0] + 3.0 * v[0] * v[1], &[1.0, 2.0], 1e-5);
        assert!((g[0] - 8.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
