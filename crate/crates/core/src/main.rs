fn main() {
    std::process::exit(arh1::cli::run(std::env::args_os()));
}
