fn main() {
    std::process::exit(facemotion::cli::run(std::env::args_os()));
}
