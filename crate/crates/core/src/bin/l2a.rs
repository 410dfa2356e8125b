fn main() {
    std::process::exit(l2a_ot::cli::cli_main(std::env::args_os()));
}
