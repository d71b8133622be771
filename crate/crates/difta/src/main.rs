fn main() {
    std::process::exit(difta::cli::run());
}
