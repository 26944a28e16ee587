fn main() {
    std::process::exit(sketchseg_cli::main_with_args(std::env::args_os()));
}
