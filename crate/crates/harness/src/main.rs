fn main() {
    std::process::exit(afa_harness::cli::run(std::env::args_os()));
}
