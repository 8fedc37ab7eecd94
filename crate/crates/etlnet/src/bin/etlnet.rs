fn main() {
    std::process::exit(etlnet::cli::run(std::env::args().skip(1).collect()));
}
