fn main() {
    std::process::exit(tgad::cli::run(std::env::args_os()));
}
