fn main() {
    std::process::exit(hsisr::cli::run());
}
