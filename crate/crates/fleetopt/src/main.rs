fn main() {
    std::process::exit(fleetopt::cli::main_with(std::env::args_os()));
}
