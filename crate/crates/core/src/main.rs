fn main() {
    std::process::exit(sdnet::cli::run(std::env::args_os()));
}
