fn main() {
    std::process::exit(cdwqc::cli::run(std::env::args_os()));
}
