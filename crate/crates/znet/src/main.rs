fn main() {
    std::process::exit(znet::cli::run(std::env::args_os()));
}
