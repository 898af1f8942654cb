fn main() {
    std::process::exit(keyseg_cli::run(std::env::args_os()));
}
