fn main() {
    std::process::exit(facilmut::cli::main());
}
