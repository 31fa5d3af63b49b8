fn main() {
    std::process::exit(mmalign::cli::run(std::env::args_os()));
}
