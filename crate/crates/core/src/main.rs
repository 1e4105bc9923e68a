fn main() {
    std::process::exit(cl3::cli::run_cli(std::env::args_os()));
}
