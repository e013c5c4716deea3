fn main() {
    std::process::exit(epifilter::cli::run(std::env::args_os()));
}
