fn main() {
    std::process::exit(scalemix::cli::run(std::env::args_os()));
}
