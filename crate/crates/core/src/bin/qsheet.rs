fn main() {
    let code = quantile_sheet::cli::run(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
