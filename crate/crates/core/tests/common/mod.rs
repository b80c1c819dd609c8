//! Independent reference computations shared by unit and integration tests.
#![allow(dead_code)]

/// Textbook recursive Cox-de Boor evaluation of every order-`m` function on `knots`.
pub fn cox_de_boor(knots: &[f64], order: usize, x: f64) -> Vec<f64> {
    fn rec(knots: &[f64], i: usize, m: usize, x: f64) -> f64 {
        if m == 1 {
            return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let d1 = knots[i + m - 1] - knots[i];
        let d2 = knots[i + m] - knots[i + 1];
        let a = if d1 == 0.0 { 0.0 } else { (x - knots[i]) / d1 * rec(knots, i, m - 1, x) };
        let b = if d2 == 0.0 { 0.0 } else { (knots[i + m] - x) / d2 * rec(knots, i + 1, m - 1, x) };
        a + b
    }
    (0..knots.len() - order).map(|i| rec(knots, i, order, x)).collect()
}

const GK_NODES: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const K15_WEIGHTS: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const G7_WEIGHTS: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = K15_WEIGHTS[7] * fc;
    let mut g = G7_WEIGHTS[3] * fc;
    for i in 0..7 {
        let s = f(c - h * GK_NODES[i]) + f(c + h * GK_NODES[i]);
        k += K15_WEIGHTS[i] * s;
        if i % 2 == 1 {
            g += G7_WEIGHTS[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod quadrature with absolute tolerance `tol`.
pub fn adaptive_integral(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn go(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
        let (v, err) = gk15(f, a, b);
        if err <= tol || depth > 40 || (b - a) < 1e-14 {
            return v;
        }
        let m = 0.5 * (a + b);
        go(f, a, m, tol * 0.5, depth + 1) + go(f, m, b, tol * 0.5, depth + 1)
    }
    go(&f, a, b, tol, 0)
}

/// Plain bisection for a nondecreasing function on `[lo, hi]`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
