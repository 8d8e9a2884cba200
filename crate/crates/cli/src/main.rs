fn main() {
    std::process::exit(spa_cli::run_cli(std::env::args_os()));
}
