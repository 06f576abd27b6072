fn main() {
    std::process::exit(mtlnet::cli::dispatch(std::env::args_os()));
}
