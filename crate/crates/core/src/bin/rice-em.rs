fn main() {
    std::process::exit(rice_em::cli::run_from(std::env::args_os()));
}
