fn main() {
    std::process::exit(brl::cli::run(std::env::args_os()));
}
