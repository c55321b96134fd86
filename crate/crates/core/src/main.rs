fn main() {
    std::process::exit(vitu::cli::cli_main(std::env::args_os()));
}
