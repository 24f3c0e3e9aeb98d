fn main() {
    std::process::exit(tokenlab::cli::dispatch(std::env::args_os()));
}
