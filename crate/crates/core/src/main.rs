fn main() {
    std::process::exit(imas::cli::main_with_args(std::env::args_os()));
}
