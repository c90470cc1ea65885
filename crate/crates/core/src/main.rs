fn main() {
    std::process::exit(metacog::cli::run(std::env::args_os()));
}
