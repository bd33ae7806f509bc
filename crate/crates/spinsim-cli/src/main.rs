fn main() {
    std::process::exit(spinsim_cli::run(std::env::args_os()));
}
