fn main() {
    std::process::exit(metakg::cli::run(std::env::args_os()));
}
