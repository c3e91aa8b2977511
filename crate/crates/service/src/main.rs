fn main() {
    std::process::exit(polyjudge::cli::main_with_args(std::env::args_os().collect()));
}
