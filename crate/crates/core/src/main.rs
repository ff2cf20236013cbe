fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(oracle_dis::cli::dispatch(&argv));
}
