fn main() {
    std::process::exit(aortaseg::cli::main());
}
