fn main() {
    std::process::exit(cocktail_miner::cli::run(std::env::args_os()));
}
