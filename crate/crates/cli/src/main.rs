fn main() {
    std::process::exit(dualpl_cli::run(std::env::args_os()));
}
