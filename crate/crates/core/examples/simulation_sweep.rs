//! A small simulation sweep: every method on two scenarios, a per-method
//! summary, then the CSV rows.

use quantile_sheet::simulation::{
    format_summary, run_sweep, summarize, write_csv, Method, Noise, Scale, Signal, SweepConfig,
};

fn main() -> quantile_sheet::Result<()> {
    let cfg = SweepConfig {
        signals: vec![Signal::G1],
        noises: vec![Noise::Gaussian, Noise::Chisq3],
        scales: vec![Scale::Linear],
        ns: vec![96],
        replications: 2,
        methods: Method::ALL.to_vec(),
        lambda_grid: vec![1e-3, 1e-2],
        mise_taus: 256,
        mise_xs: 1000,
        ..SweepConfig::default()
    };
    let results = run_sweep(&cfg)?;
    print!("{}", format_summary(&summarize(&results)));
    println!();
    write_csv(&results, std::io::stdout())
}
