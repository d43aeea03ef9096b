fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(grpolab::harness::cli_main(&args));
}
