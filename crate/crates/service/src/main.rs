fn main() {
    std::process::exit(camtrap::cli::main());
}
