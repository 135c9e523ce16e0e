fn main() {
    std::process::exit(coembed::cli::run(std::env::args_os()));
}
