fn main() {
    std::process::exit(cgfac::cli::run(std::env::args_os()));
}
