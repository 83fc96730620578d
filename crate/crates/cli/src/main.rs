fn main() {
    std::process::exit(nmtforge_cli::cli::run(std::env::args_os()));
}
