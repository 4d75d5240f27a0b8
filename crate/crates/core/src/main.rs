fn main() {
    std::process::exit(vaeloop::cli::run(std::env::args_os()));
}
