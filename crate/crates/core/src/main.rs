fn main() {
    std::process::exit(mvalign::cli::run(std::env::args_os()));
}
