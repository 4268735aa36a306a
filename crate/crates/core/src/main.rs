fn main() {
    std::process::exit(onetrack::harness::cli::run(std::env::args_os()));
}
