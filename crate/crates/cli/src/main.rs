fn main() {
    std::process::exit(pixmatch_cli::run(std::env::args_os()));
}
