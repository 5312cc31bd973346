fn main() {
    let code = adapter_forge::cli::run(std::env::args().skip(1));
    std::process::exit(code);
}
