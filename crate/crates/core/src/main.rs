fn main() {
    std::process::exit(iontrack::cli::dispatch(std::env::args().skip(1)));
}
