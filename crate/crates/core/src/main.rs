fn main() {
    std::process::exit(kpop::cli::run(std::env::args_os()));
}
