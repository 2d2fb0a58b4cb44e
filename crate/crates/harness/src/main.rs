fn main() {
    std::process::exit(safectl_harness::cli_main(std::env::args_os()));
}
