fn main() {
    std::process::exit(neuromoco::cli::run(std::env::args_os()));
}
