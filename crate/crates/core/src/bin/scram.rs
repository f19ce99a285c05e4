fn main() {
    std::process::exit(scram::cli::run(std::env::args_os()));
}
