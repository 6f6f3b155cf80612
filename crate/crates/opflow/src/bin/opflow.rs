fn main() {
    std::process::exit(opflow::cli::run(std::env::args_os()));
}
