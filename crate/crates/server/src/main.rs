fn main() {
    std::process::exit(kgnav_server::cli::main());
}
