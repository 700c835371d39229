fn main() {
    std::process::exit(svgpcr::cli::run(std::env::args_os()));
}
