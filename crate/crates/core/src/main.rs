fn main() {
    std::process::exit(churncomm::cli::main());
}
