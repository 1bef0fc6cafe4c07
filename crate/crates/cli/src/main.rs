fn main() {
    std::process::exit(restdyn_cli::run(std::env::args_os()));
}
