//! B-spline bases on a uniform extended knot vector: partition of unity and
//! closed-form integrals checked against a fine midpoint rule.

use quantile_sheet::splines::{eval_basis, integrate_basis_prefix, integrate_tau_weighted, KnotVector};

fn midpoint_rule(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    (0..n).map(|i| f(a + (i as f64 + 0.5) * h)).sum::<f64>() * h
}

fn main() -> quantile_sheet::Result<()> {
    for order in 1..=4 {
        let kv = KnotVector::new(5, order, (0.0, 1.0))?;
        let pts: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        let b = eval_basis(&kv, &pts)?;
        let unity = b
            .values
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max);

        let upper = 0.63;
        let prefix = integrate_basis_prefix(&kv, upper)?;
        let first_moment = integrate_tau_weighted(&kv)?;
        let mut worst = 0.0f64;
        for j in 0..kv.basis_count() {
            let basis_j = |t: f64| kv.eval_row(t).unwrap()[j];
            worst = worst
                .max((prefix[j] - midpoint_rule(basis_j, 0.0, upper, 20_000)).abs())
                .max((first_moment[j] - midpoint_rule(|t| t * basis_j(t), 0.0, 1.0, 20_000)).abs());
        }
        println!(
            "order {order}: {} functions, max |sum - 1| = {unity:.1e}, max integral error = {worst:.1e}",
            kv.basis_count()
        );
    }
    Ok(())
}
