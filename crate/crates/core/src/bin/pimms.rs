fn main() {
    std::process::exit(pimms::cli::run(std::env::args_os()));
}
