fn main() {
    std::process::exit(linkgen::cli::dispatch(std::env::args_os()));
}
