fn main() {
    std::process::exit(dtgan::cli::run());
}
