fn main() {
    std::process::exit(airsq::cli::main_with_args(std::env::args_os()));
}
