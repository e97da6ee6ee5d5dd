fn main() {
    std::process::exit(rarelink::cli::run(std::env::args_os()));
}
