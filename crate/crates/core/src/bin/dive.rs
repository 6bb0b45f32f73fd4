fn main() {
    std::process::exit(dive_core::harness::run_cli(std::env::args_os()));
}
