//! Fit on covariates in data units, save the model, reload it and predict.
//! Predictions from the reloaded model match bit for bit.

use quantile_sheet::cli::{fit_model, FitSection};
use quantile_sheet::loss_exact::Dataset;
use quantile_sheet::model::SheetModel;

fn main() -> quantile_sheet::Result<()> {
    // temperatures against hour of day
    let xs: Vec<f64> = (0..120).map(|i| 24.0 * i as f64 / 119.0).collect();
    let ys: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, &h)| 15.0 + 6.0 * ((h - 9.0) * std::f64::consts::PI / 12.0).sin() + ((i * 37 % 11) as f64 - 5.0) * 0.4)
        .collect();
    let data = Dataset::new(xs, ys)?;
    let model = fit_model(&FitSection::default(), &data)?;

    let path = std::env::temp_dir().join("qsheet_example_model.json");
    model.save(&path)?;
    let reloaded = SheetModel::load(&path)?;
    println!("saved to {}", path.display());
    for hour in [0.0, 6.0, 15.0, 24.0] {
        let q: Vec<f64> = [0.1, 0.5, 0.9]
            .iter()
            .map(|&t| reloaded.quantile(t, hour))
            .collect::<quantile_sheet::Result<_>>()?;
        assert_eq!(q[1], model.quantile(0.5, hour)?);
        println!("hour {hour:>4}: q10 {:.2}  q50 {:.2}  q90 {:.2}", q[0], q[1], q[2]);
    }
    std::fs::remove_file(&path).ok();
    Ok(())
}
