fn main() {
    std::process::exit(caveforge::cli::run());
}
