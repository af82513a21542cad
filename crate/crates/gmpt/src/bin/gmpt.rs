fn main() {
    std::process::exit(gmpt::cli::run(std::env::args_os()));
}
