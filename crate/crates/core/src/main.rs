fn main() {
    std::process::exit(int2int::cli::run(std::env::args_os()));
}
