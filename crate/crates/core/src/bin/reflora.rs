fn main() {
    std::process::exit(reflora::cli::parse_and_dispatch(std::env::args_os()));
}
