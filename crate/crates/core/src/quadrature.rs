//! Adaptive composite Simpson quadrature.

use crate::num::Real;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("adaptive Simpson did not reach tolerance {tol} within {max_panels} panels on [{a}, {b}]")]
pub struct QuadratureNotConverged {
    pub a: f64,
    pub b: f64,
    pub tol: f64,
    pub max_panels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Simpson<T> {
    pub abs_tol: T,
    pub max_panels: usize,
}

impl<T: Real> Default for Simpson<T> {
    fn default() -> Self {
        Simpson { abs_tol: T::lit(1e-8), max_panels: 1_000_000 }
    }
}

struct Panel<T> {
    a: T,
    b: T,
    fa: T,
    fm: T,
    fb: T,
    whole: T,
    tol: T,
    depth: u32,
}

const MAX_DEPTH: u32 = 50;

impl<T: Real> Simpson<T> {
    /// `∫ₐᵇ f` to absolute tolerance `abs_tol`. The tolerance is split across the
    /// breakpoints given in `knots`, which should contain every discontinuity of `f`.
    /// `f` is taken as right-continuous: the right end of each piece is evaluated just
    /// inside the piece so a jump at the knot does not leak into it.
    pub fn integrate_piecewise<F: FnMut(T) -> T>(&self, mut f: F, knots: &[T]) -> Result<T, QuadratureNotConverged> {
        if knots.len() < 2 {
            return Ok(T::zero());
        }
        let pieces = T::from_count(knots.len() - 1);
        let mut total = T::zero();
        let mut panels = 0;
        for w in knots.windows(2) {
            total += self.integrate_inner(&mut f, w[0], w[1], self.abs_tol / pieces, true, &mut panels)?;
        }
        Ok(total)
    }

    pub fn integrate<F: FnMut(T) -> T>(&self, mut f: F, a: T, b: T) -> Result<T, QuadratureNotConverged> {
        let mut panels = 0;
        self.integrate_inner(&mut f, a, b, self.abs_tol, false, &mut panels)
    }

    fn integrate_inner<F: FnMut(T) -> T>(
        &self,
        f: &mut F,
        a: T,
        b: T,
        tol: T,
        left_limit_at_b: bool,
        panels: &mut usize,
    ) -> Result<T, QuadratureNotConverged> {
        if b <= a {
            return Ok(T::zero());
        }
        let half = T::lit(0.5);
        let six = T::lit(6.0);
        let fail = || QuadratureNotConverged {
            a: a.as_f64(),
            b: b.as_f64(),
            tol: self.abs_tol.as_f64(),
            max_panels: self.max_panels,
        };
        let b_eval = if left_limit_at_b { b - (b - a) * T::epsilon() * T::lit(16.0) } else { b };
        let (fa, fb) = (f(a), f(b_eval));
        let m = half * (a + b);
        let fm = f(m);
        let whole = (b - a) / six * (fa + T::lit(4.0) * fm + fb);
        let mut stack = vec![Panel { a, b, fa, fm, fb, whole, tol, depth: 0 }];
        let mut total = T::zero();
        *panels += 1;
        while let Some(p) = stack.pop() {
            let m = half * (p.a + p.b);
            let (lm, rm) = (half * (p.a + m), half * (m + p.b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - p.a) / six * (p.fa + T::lit(4.0) * flm + p.fm);
            let right = (p.b - m) / six * (p.fm + T::lit(4.0) * frm + p.fb);
            let delta = left + right - p.whole;
            if !delta.is_finite() {
                return Err(fail());
            }
            if delta.abs() <= T::lit(15.0) * p.tol || p.depth >= MAX_DEPTH {
                if p.depth >= MAX_DEPTH && delta.abs() > T::lit(15.0) * p.tol {
                    return Err(fail());
                }
                total += left + right + delta / T::lit(15.0);
                continue;
            }
            *panels += 1;
            if *panels > self.max_panels {
                return Err(fail());
            }
            let tol = half * p.tol;
            let depth = p.depth + 1;
            stack.push(Panel { a: m, b: p.b, fa: p.fm, fm: frm, fb: p.fb, whole: right, tol, depth });
            stack.push(Panel { a: p.a, b: m, fa: p.fa, fm: flm, fb: p.fm, whole: left, tol, depth });
        }
        Ok(total)
    }
}
