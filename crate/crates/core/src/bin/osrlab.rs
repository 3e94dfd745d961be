fn main() {
    std::process::exit(osrlab::cli::run(std::env::args_os()));
}
