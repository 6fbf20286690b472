fn main() {
    std::process::exit(basiscluster::cli::main());
}
