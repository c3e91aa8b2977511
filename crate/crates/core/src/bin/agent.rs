fn main() {
    std::process::exit(polyjudge_core::harness::agent::agent_main(std::env::args().skip(1)));
}
