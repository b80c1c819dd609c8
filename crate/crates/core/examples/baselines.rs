//! Comparison fits: per-τ IRLS (with and without monotone increments) and the
//! two-step local-quantile smoother.

use quantile_sheet::baselines::{default_tau_grid, fit_irls_sheet, fit_two_step, IrlsConfig, DEFAULT_SPAN};
use quantile_sheet::constraint::SheetSpec;
use quantile_sheet::model::{Lambdas, SheetModel};
use quantile_sheet::simulation::{mise, Noise, Scale, Scenario, Signal};

fn main() -> quantile_sheet::Result<()> {
    let scenario = Scenario {
        signal: Signal::G4,
        noise: Noise::Laplace,
        scale: Scale::Quadratic,
        n: 128,
        replications: 1,
        seed: 3,
        center_median: false,
    };
    let data = scenario.gen_data(0);
    let spec = SheetSpec::uniform(8, 4, 8, 4)?;
    let lambdas = Lambdas::uniform(1e-3);

    let fits: Vec<(&str, SheetModel)> = vec![
        ("irls, monotone", fit_irls_sheet(&spec, &data, &lambdas, &IrlsConfig::default())?),
        (
            "irls, free",
            fit_irls_sheet(
                &spec,
                &data,
                &lambdas,
                &IrlsConfig {
                    monotone: false,
                    ..IrlsConfig::default()
                },
            )?,
        ),
        ("two-step", fit_two_step(&spec, &data, &lambdas, &default_tau_grid(), DEFAULT_SPAN)?),
    ];
    for (name, model) in &fits {
        let m = mise(model, &scenario, 256, 1000)?;
        println!(
            "{name:<15} trimmed MISE {:.4e}  full {:.4e}  crossings {}",
            m.trimmed, m.full, m.crossings
        );
    }
    Ok(())
}
