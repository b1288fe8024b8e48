fn main() {
    std::process::exit(icq_lab::cli::run(std::env::args_os()));
}
