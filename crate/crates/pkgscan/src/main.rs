fn main() {
    std::process::exit(pkgscan::cli::run(std::env::args().collect()));
}
