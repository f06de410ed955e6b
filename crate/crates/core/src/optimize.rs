//! Bounded one-dimensional minimisation: downhill bracket search followed by
//! Brent's parabolic/golden-section method.

const GOLDEN: f64 = 0.381_966_011_250_105_1;

/// Outcome of a scalar minimisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    pub x: f64,
    pub fx: f64,
    pub evaluations: usize,
}

/// Minimises `f` on `[lo, hi]` starting from `x0`.
///
/// `step` is the initial probe distance. The returned value never exceeds
/// `f(x0)`, so a coordinate update built on it cannot increase the objective.
/// Non-finite function values are treated as `+inf`.
pub fn minimize_bounded<F: FnMut(f64) -> f64>(
    mut f: F,
    x0: f64,
    lo: f64,
    hi: f64,
    step: f64,
    xtol: f64,
) -> Minimum {
    debug_assert!(lo < hi);
    let mut evals = 0usize;
    let mut eval = |x: f64| {
        evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let x0 = x0.clamp(lo, hi);
    let f0 = eval(x0);
    let step = step.abs().max(xtol * 10.0).min(hi - lo);

    // Pick the downhill direction.
    let xr = (x0 + step).min(hi);
    let xl = (x0 - step).max(lo);
    let fr = if xr > x0 { eval(xr) } else { f64::INFINITY };
    let fl = if xl < x0 { eval(xl) } else { f64::INFINITY };

    let (a, b, c, fb);
    if f0 <= fr && f0 <= fl {
        a = xl;
        b = x0;
        c = xr;
        fb = f0;
    } else {
        let dir = if fr < fl { 1.0 } else { -1.0 };
        let (mut prev, mut cur, mut fcur) = if dir > 0.0 { (x0, xr, fr) } else { (x0, xl, fl) };
        let mut width = step;
        loop {
            width *= 2.0;
            let next = (cur + dir * width).clamp(lo, hi);
            if next == cur {
                // Pinned at a bound.
                let lower = if dir > 0.0 { prev } else { cur };
                let upper = if dir > 0.0 { cur } else { prev };
                a = lower;
                c = upper;
                b = cur;
                fb = fcur;
                break;
            }
            let fnext = eval(next);
            if fnext >= fcur {
                a = prev.min(next);
                c = prev.max(next);
                b = cur;
                fb = fcur;
                break;
            }
            prev = cur;
            cur = next;
            fcur = fnext;
        }
    }

    let best = brent(&mut eval, a, b, c, fb, xtol);
    let mut out = if best.1 <= f0 {
        Minimum { x: best.0, fx: best.1, evaluations: 0 }
    } else {
        Minimum { x: x0, fx: f0, evaluations: 0 }
    };
    out.evaluations = evals;
    out
}

/// Brent's method on the bracket `a <= b <= c` with `f(b)` known.
fn brent<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64, c: f64, fb: f64, xtol: f64) -> (f64, f64) {
    let (mut a, mut bnd) = (a.min(c), a.max(c));
    if bnd - a <= 0.0 {
        return (b, fb);
    }
    let mut x = b;
    let mut w = b;
    let mut v = b;
    let mut fx = fb;
    let mut fw = fb;
    let mut fv = fb;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..200 {
        let xm = 0.5 * (a + bnd);
        let tol1 = xtol * x.abs() + 1e-14;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (bnd - a) {
            break;
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (bnd - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || bnd - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { bnd - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                bnd = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                bnd = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let m = minimize_bounded(|x| (x - 3.0).powi(2) + 1.0, 0.0, -10.0, 10.0, 0.1, 1e-10);
        assert!((m.x - 3.0).abs() < 1e-7, "{m:?}");
        assert!((m.fx - 1.0).abs() < 1e-12);
    }

    #[test]
    fn respects_bounds() {
        let m = minimize_bounded(|x| x, 0.5, 0.0, 1.0, 0.1, 1e-10);
        assert!(m.x < 1e-8, "{m:?}");
        let m = minimize_bounded(|x| -x, 0.5, 0.0, 1.0, 0.1, 1e-10);
        assert!(m.x > 1.0 - 1e-8, "{m:?}");
    }

    #[test]
    fn non_smooth_and_far_start() {
        let m = minimize_bounded(|x: f64| (x - 40.0).abs(), -45.0, -50.0, 50.0, 0.01, 1e-10);
        assert!((m.x - 40.0).abs() < 1e-6, "{m:?}");
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: f64| (5.0 * x).sin() + 0.1 * x * x;
        for x0 in [-3.0, -1.0, 0.0, 0.7, 2.5] {
            let m = minimize_bounded(f, x0, -4.0, 4.0, 0.05, 1e-10);
            assert!(m.fx <= f(x0));
        }
    }

    #[test]
    fn nan_is_treated_as_infinite() {
        let m = minimize_bounded(|x: f64| if x < 0.0 { f64::NAN } else { (x - 1.0).powi(2) }, 0.5, -2.0, 2.0, 0.5, 1e-10);
        assert!((m.x - 1.0).abs() < 1e-6);
    }
}
