fn main() {
    std::process::exit(tandemnet::cli::main());
}
