fn main() {
    std::process::exit(icmp_compute::harness::run_cli(std::env::args_os()));
}
