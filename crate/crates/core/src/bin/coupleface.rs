fn main() {
    std::process::exit(coupleface::cli::run(std::env::args()));
}
