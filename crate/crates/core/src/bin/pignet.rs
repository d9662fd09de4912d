fn main() {
    std::process::exit(pignet::cli::run(std::env::args_os()));
}
