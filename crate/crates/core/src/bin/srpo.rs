fn main() {
    std::process::exit(srpo_core::cli::run(std::env::args_os()));
}
