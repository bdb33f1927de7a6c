fn main() {
    std::process::exit(linear_kv::cli::run_cli(std::env::args_os()));
}
