fn main() {
    std::process::exit(topoguide_cli::run_from(std::env::args_os()));
}
