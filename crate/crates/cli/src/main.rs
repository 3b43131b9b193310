fn main() {
    std::process::exit(riskway_cli::cli_main(std::env::args_os()));
}
