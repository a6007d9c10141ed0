fn main() {
    std::process::exit(coffe::cli::run(std::env::args()));
}
