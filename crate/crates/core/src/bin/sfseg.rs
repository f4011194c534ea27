fn main() {
    std::process::exit(sfseg::cli::run(std::env::args_os()));
}
