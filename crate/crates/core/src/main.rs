fn main() {
    std::process::exit(nkscopf::cli::run_from(std::env::args_os()));
}
