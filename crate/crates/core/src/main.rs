fn main() {
    std::process::exit(mixr2::cli::run(std::env::args_os()));
}
