fn main() {
    std::process::exit(octillum::cli::cli_main(std::env::args_os()));
}
