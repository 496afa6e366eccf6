fn main() {
    std::process::exit(fedstar::cli::run());
}
