fn main() {
    std::process::exit(reflectdepth::cli::main_with_args(std::env::args_os()));
}
