fn main() {
    std::process::exit(nmode::cli::run(std::env::args_os()));
}
