//! One-dimensional minimization used by the greedy and lower-bound solvers.

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Minimizes `f` on `[lo, hi]` by golden-section search until the bracket is
/// shorter than `tol`. Both end points are also evaluated, so a minimum on
/// the boundary of a monotone objective is returned exactly.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    debug_assert!(lo <= hi);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a) > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    let mut best = (mid, f(mid));
    for cand in [(c, fc), (d, fd), (lo, f(lo)), (hi, f(hi))] {
        if cand.1 < best.1 {
            best = cand;
        }
    }
    best
}

/// Exhaustive scan on `points + 1` uniformly spaced values of `[lo, hi]`.
pub fn grid_scan<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, points: usize) -> (f64, f64) {
    let mut best = (lo, f(lo));
    for i in 1..=points {
        let x = lo + (hi - lo) * i as f64 / points as f64;
        let fx = f(x);
        if fx < best.1 {
            best = (x, fx);
        }
    }
    best
}
