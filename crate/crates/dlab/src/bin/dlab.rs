fn main() {
    std::process::exit(dlab::cli::run(std::env::args_os()));
}
