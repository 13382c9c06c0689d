fn main() {
    std::process::exit(remoe_lab::cli::main_with_args(std::env::args_os()));
}
