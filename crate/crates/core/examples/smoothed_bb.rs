//! Smoothed loss with Barzilai-Borwein steps, over a range of bandwidths.

use quantile_sheet::constraint::SheetSpec;
use quantile_sheet::loss_smoothed::{KernelKind, KernelSpec};
use quantile_sheet::model::{AffineMap, Lambdas, SheetModel};
use quantile_sheet::optim::{fit_bb, LossKind, OptimConfig};
use quantile_sheet::simulation::{mise, Noise, Scale, Scenario, Signal};

fn main() -> quantile_sheet::Result<()> {
    let scenario = Scenario {
        signal: Signal::G1,
        noise: Noise::T3,
        scale: Scale::Constant,
        n: 256,
        replications: 1,
        seed: 9,
        center_median: false,
    };
    let data = scenario.gen_data(0);
    let spec = SheetSpec::uniform(6, 4, 6, 4)?;
    let lambdas = Lambdas::uniform(1e-3);
    let penalty = lambdas.penalty(&spec)?;
    let chosen = KernelSpec::data_bandwidth(&data);
    println!("data-driven bandwidth {chosen:.4}");
    for h in [chosen / 4.0, chosen, chosen * 4.0] {
        for kind in [KernelKind::Gaussian, KernelKind::Epanechnikov] {
            let loss = LossKind::Smoothed {
                kernel: KernelSpec::new(kind, h)?,
                n_tau: 256,
            };
            let report = fit_bb(&spec, &data, &penalty, &OptimConfig::default(), loss)?;
            let model = SheetModel::from_report(&spec, &report, lambdas, AffineMap::IDENTITY, "smoothed");
            let m = mise(&model, &scenario, 256, 512)?;
            println!(
                "h {h:.4} {kind:?}: {:?} in {} iterations, trimmed MISE {:.4e}",
                report.stop_reason, report.iterations, m.trimmed
            );
        }
    }
    Ok(())
}
