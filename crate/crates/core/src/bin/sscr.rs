fn main() {
    std::process::exit(sscr::cli::run(std::env::args_os()));
}
