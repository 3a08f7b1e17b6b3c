fn main() {
    std::process::exit(mate_kd::cli::main_with_args(std::env::args_os()));
}
