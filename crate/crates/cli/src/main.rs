fn main() {
    std::process::exit(stochlab_cli::run(std::env::args_os()));
}
