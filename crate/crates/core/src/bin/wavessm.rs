fn main() {
    std::process::exit(wavessm::cli::run_from_env());
}
