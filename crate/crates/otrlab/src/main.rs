fn main() {
    std::process::exit(otrlab::cli::main());
}
