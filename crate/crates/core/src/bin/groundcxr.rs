fn main() {
    std::process::exit(groundcxr::cli::run(std::env::args_os()));
}
