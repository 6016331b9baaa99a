fn main() {
    std::process::exit(seq2seg::cli::run(std::env::args_os()));
}
