fn main() {
    std::process::exit(gendix::cli::main_with_args(std::env::args_os()));
}
