fn main() {
    std::process::exit(retclip::cli::main_with_args(std::env::args_os()));
}
