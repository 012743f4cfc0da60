fn main() {
    std::process::exit(airfeel_cli::run_cli(std::env::args_os()));
}
