fn main() {
    let code = igbeat::harness::cli::run(std::env::args_os());
    std::process::exit(code);
}
