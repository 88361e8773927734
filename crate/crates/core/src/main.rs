fn main() {
    std::process::exit(spdnas::cli::run(std::env::args_os()));
}
