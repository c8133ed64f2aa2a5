fn main() {
    std::process::exit(fedcot::cli::run(std::env::args_os()));
}
