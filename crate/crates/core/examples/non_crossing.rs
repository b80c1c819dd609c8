//! Any coefficient vector gives a sheet that is nondecreasing in τ, however
//! wild. Compare with the same coefficients used without the constraint.

use quantile_sheet::constraint::{eval_sheet, free_state, map_beta, SheetSpec};
use quantile_sheet::simulation::count_crossings;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> quantile_sheet::Result<()> {
    let spec = SheetSpec::uniform(6, 4, 6, 4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    for trial in 0..5 {
        let beta: Vec<f64> = (0..spec.dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
        let constrained = map_beta(&beta, spec.k_x())?;
        let free = free_state(&beta, spec.k_x())?;
        let q = eval_sheet(&spec, &constrained, &grid, &grid)?;
        let min_step = (1..grid.len())
            .flat_map(|i| (0..grid.len()).map(move |j| (i, j)))
            .map(|(i, j)| q[[i, j]] - q[[i - 1, j]])
            .fold(f64::INFINITY, f64::min);
        let sheet = |t: &[f64], x: &[f64]| eval_sheet(&spec, &constrained, t, x);
        let raw = |t: &[f64], x: &[f64]| eval_sheet(&spec, &free, t, x);
        println!(
            "trial {trial}: min τ-increment {min_step:.3e}, crossings {} constrained vs {} unconstrained",
            count_crossings(&sheet, &grid, &grid)?,
            count_crossings(&raw, &grid, &grid)?
        );
    }
    Ok(())
}
