fn main() {
    std::process::exit(cooccur_lab::cli::run(std::env::args_os()));
}
