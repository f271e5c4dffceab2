fn main() {
    std::process::exit(natsel::cli::run(std::env::args_os()));
}
