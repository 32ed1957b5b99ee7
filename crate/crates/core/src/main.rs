fn main() {
    std::process::exit(pixelseg::datakit::cli::run(std::env::args_os()));
}
