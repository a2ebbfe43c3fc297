fn main() {
    std::process::exit(cdt::cli::main());
}
