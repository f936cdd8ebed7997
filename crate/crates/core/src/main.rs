fn main() {
    std::process::exit(fieldpod::cli::main());
}
