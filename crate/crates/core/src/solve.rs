//! Derivative-free one-dimensional solvers.

use crate::num::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Root<T> {
    pub x: T,
    pub fx: T,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RootError<T, E> {
    /// `f(a)` and `f(b)` have the same strict sign.
    NoSignChange {
        a: T,
        fa: T,
        b: T,
        fb: T,
    },
    Fun(E),
}

/// Brent's bracketed root finder (bisection, secant and inverse quadratic steps).
///
/// Stops when the bracket is narrower than `xtol` and `|f| <= ftol`, when `f` is
/// exactly zero, or when the bracket can no longer shrink in floating point.
pub fn brent<T, E, F>(mut f: F, a: T, b: T, xtol: T, ftol: T, max_iter: usize) -> Result<Root<T>, RootError<T, E>>
where
    T: Real,
    F: FnMut(T) -> Result<T, E>,
{
    let (mut a, mut b) = (a, b);
    let mut fa = f(a).map_err(RootError::Fun)?;
    let mut fb = f(b).map_err(RootError::Fun)?;
    if fa == T::zero() {
        return Ok(Root { x: a, fx: fa, iterations: 0 });
    }
    if fb == T::zero() {
        return Ok(Root { x: b, fx: fb, iterations: 0 });
    }
    if (fa > T::zero()) == (fb > T::zero()) {
        return Err(RootError::NoSignChange { a, fa, b, fb });
    }
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    let mut best = Root { x: b, fx: fb, iterations: 0 };
    for it in 1..=max_iter {
        if (fb > T::zero()) == (fc > T::zero()) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        best = Root { x: b, fx: fb, iterations: it };
        let tol = two * T::epsilon() * b.abs() + half * xtol;
        let m = half * (c - b);
        let narrow = m.abs() <= tol;
        if fb == T::zero() || (narrow && fb.abs() <= ftol) {
            return Ok(best);
        }
        // Bracket at floating-point resolution: nothing more to gain.
        if (c - b).abs() <= two * T::epsilon() * b.abs().max(T::min_positive_value()) {
            return Ok(best);
        }
        let tol_step = if narrow { T::epsilon() * b.abs().max(T::one()) } else { tol };
        if e.abs() >= tol_step && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = two * m * s;
                q = T::one() - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (two * m * qa * (qa - r) - (b - a) * (r - T::one()));
                q = (qa - T::one()) * (r - T::one()) * (s - T::one());
            }
            if p > T::zero() {
                q = -q;
            } else {
                p = -p;
            }
            if two * p < (T::lit(3.0) * m * q - (tol_step * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b = if d.abs() > tol_step {
            b + d
        } else if m > T::zero() {
            b + tol_step
        } else {
            b - tol_step
        };
        fb = f(b).map_err(RootError::Fun)?;
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Maximum<T> {
    pub x: T,
    pub fx: T,
    pub iterations: usize,
}

/// Golden-section search for the maximum of a unimodal `f` on `[a, b]`, refined
/// until the bracket is narrower than `xtol`.
pub fn golden_section_max<T, E, F>(mut f: F, a: T, b: T, xtol: T) -> Result<Maximum<T>, E>
where
    T: Real,
    F: FnMut(T) -> Result<T, E>,
{
    let inv_phi = (T::lit(5.0).sqrt() - T::one()) / T::lit(2.0);
    let (mut a, mut b) = (a, b);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    let mut iterations = 0;
    while (b - a).abs() >= xtol {
        iterations += 1;
        // NaN compares false, so a NaN at x1 moves the bracket toward x2.
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2)?;
        }
    }
    let (x, fx) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    Ok(Maximum { x, fx, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn ok(x: f64) -> Result<f64, Infallible> {
        Ok(x)
    }

    #[test]
    fn finds_sqrt_two() {
        let r = brent(|x: f64| ok(x * x - 2.0), 0.0, 2.0, 1e-12, 1e-14, 100).unwrap();
        assert!((r.x - 2f64.sqrt()).abs() < 1e-12);
        assert!(r.fx.abs() <= 1e-14);
    }

    #[test]
    fn flat_then_steep() {
        let r = brent(|x: f64| ok((x - 0.3).powi(3) * 1e3), -5.0, 5.0, 1e-8, 1e-10, 200).unwrap();
        assert!((r.x - 0.3).abs() < 1e-3);
        assert!(r.fx.abs() <= 1e-10);
    }

    #[test]
    fn reports_missing_sign_change() {
        let err = brent(|x: f64| ok(x * x + 1.0), -1.0, 1.0, 1e-8, 1e-10, 50).unwrap_err();
        assert!(matches!(err, RootError::NoSignChange { .. }));
    }

    #[test]
    fn golden_section_on_concave_function() {
        let m = golden_section_max(|x: f64| ok(-(x - 1.25).powi(2)), -12.0, 12.0, 1e-6).unwrap();
        assert!((m.x - 1.25).abs() < 1e-6);
    }

    #[test]
    fn golden_section_tolerates_neg_infinity() {
        let m = golden_section_max(|x: f64| ok(if x < 0.0 { f64::NEG_INFINITY } else { -x }), -1.0, 3.0, 1e-7).unwrap();
        assert!(m.x.abs() < 1e-6);
    }

    #[test]
    fn f32_root() {
        let r = brent(|x: f32| Ok::<_, Infallible>(x - 0.5), 0.0, 1.0, 1e-6, 1e-7, 100).unwrap();
        assert!((r.x - 0.5).abs() < 1e-6);
    }
}
