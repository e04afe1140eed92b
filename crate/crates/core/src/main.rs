fn main() {
    std::process::exit(tsnas::cli::run());
}
