fn main() {
    std::process::exit(decoupled_nas::cli::main_entry());
}
