fn main() {
    std::process::exit(metro_cli::run(std::env::args_os()));
}
