fn main() {
    std::process::exit(liouville::cli::main(std::env::args_os()));
}
