fn main() {
    std::process::exit(exp4dvar::cli::run());
}
