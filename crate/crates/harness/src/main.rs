fn main() {
    std::process::exit(visualrwkv_harness::cli::run(std::env::args_os()));
}
