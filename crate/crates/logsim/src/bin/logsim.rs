fn main() {
    std::process::exit(logsim::cli::run(std::env::args().skip(1)));
}
