fn main() {
    std::process::exit(kdseg_cli::run(std::env::args_os()));
}
