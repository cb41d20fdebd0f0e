fn main() {
    std::process::exit(resfuse::cli::run_from(std::env::args_os()));
}
