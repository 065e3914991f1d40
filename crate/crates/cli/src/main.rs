fn main() {
    std::process::exit(clusterseg_cli::run(std::env::args_os()));
}
