//! Exact integrated-pinball fit with backtracking gradient descent.

use quantile_sheet::constraint::SheetSpec;
use quantile_sheet::model::{AffineMap, Lambdas, SheetModel};
use quantile_sheet::optim::{fit_backtracking, LossKind, OptimConfig};
use quantile_sheet::simulation::{Noise, Scale, Scenario, Signal};

fn main() -> quantile_sheet::Result<()> {
    let scenario = Scenario {
        signal: Signal::G2,
        noise: Noise::Gaussian,
        scale: Scale::Linear,
        n: 200,
        replications: 1,
        seed: 5,
        center_median: false,
    };
    let data = scenario.gen_data(0);
    let spec = SheetSpec::uniform(6, 4, 6, 4)?;
    let lambdas = Lambdas::uniform(1e-3);
    let report = fit_backtracking(&spec, &data, &lambdas.penalty(&spec)?, &OptimConfig::default(), LossKind::Exact)?;
    println!(
        "{:?} after {} iterations, loss {:.6} -> {:.6}, |grad| {:.2e}",
        report.stop_reason,
        report.iterations,
        report.loss_trace[0],
        report.final_loss(),
        report.final_grad_norm()
    );

    let model = SheetModel::from_report(&spec, &report, lambdas, AffineMap::IDENTITY, "exact");
    println!("   x    tau   fitted    true");
    for x in [0.1, 0.5, 0.9] {
        for tau in [0.1, 0.5, 0.9] {
            println!(
                "{x:>4} {tau:>6} {:>8.3} {:>7.3}",
                model.quantile(tau, x)?,
                scenario.true_quantile(tau, x)?
            );
        }
    }
    Ok(())
}
