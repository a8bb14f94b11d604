fn main() {
    std::process::exit(adnas::cli::run(std::env::args_os()));
}
