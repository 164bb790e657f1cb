fn main() {
    std::process::exit(npx_core::cli::main_with_args(std::env::args_os()));
}
