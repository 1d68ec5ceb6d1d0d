fn main() {
    std::process::exit(rlisn::cli::run(std::env::args_os()));
}
