fn main() {
    std::process::exit(jumpest::cli::main_entry());
}
