fn main() {
    std::process::exit(sage_hbf::cli::main_with_args(std::env::args_os()));
}
