fn main() {
    std::process::exit(crema_core::cli::main_with_args(std::env::args_os()));
}
